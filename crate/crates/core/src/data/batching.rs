use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::tasks::{Example, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::TokenBlock;

/// A padded mini-batch for teacher-forced training.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: TokenBlock,
    /// `bos` followed by the target, padded.
    pub tgt_in: TokenBlock,
    /// Target followed by `eos`, aligned with `tgt_in` rows; `None` on padding.
    pub targets: Vec<Option<usize>>,
    /// Target tokens in the batch, excluding the `bos`/`eos` specials.
    pub token_count: usize,
    /// Positions of the examples in the split they came from.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], indices: Vec<usize>) -> Result<Self> {
        let src: Vec<Vec<usize>> = examples.iter().map(|e| e.src.clone()).collect();
        let tgt_in: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.tgt.iter().copied()).collect())
            .collect();
        let src = TokenBlock::from_sequences(&src, PAD)?;
        let tgt_in = TokenBlock::from_sequences(&tgt_in, PAD)?;
        let mut targets = Vec::with_capacity(tgt_in.batch * tgt_in.len);
        for e in examples {
            targets.extend(e.tgt.iter().map(|&t| Some(t)));
            targets.push(Some(EOS));
            targets.extend(std::iter::repeat_n(None, tgt_in.len - e.tgt.len() - 1));
        }
        Ok(Batch {
            src,
            tgt_in,
            targets,
            token_count: examples.iter().map(|e| e.tgt.len()).sum(),
            indices,
        })
    }

    pub fn src_mask(&self) -> Vec<bool> {
        self.src.mask()
    }

    pub fn tgt_mask(&self) -> Vec<bool> {
        self.tgt_in.mask()
    }

    #[allow(clippy::misnamed_getters)]
    pub fn len(&self) -> usize {
        self.src.batch
    }

    pub fn is_empty(&self) -> bool {
        self.src.batch == 0
    }
}

/// Packs a split into batches of at most `batch_tokens` target tokens.
///
/// Examples are shuffled with `seed`, stably sorted by target length so that
/// batches hold similar lengths, packed greedily, and the batch order is
/// shuffled again. Every example lands in exactly one batch.
pub fn make_batches(split: &[Example], batch_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if split.is_empty() {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    if let Some(e) = split
        .iter()
        .find(|e| e.tgt.len() > batch_tokens || e.tgt.is_empty())
    {
        return Err(Error::Data(format!(
            "sequence of length {} does not fit batch_tokens {batch_tokens}",
            e.tgt.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| split[i].tgt.len());

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = split[i].tgt.len();
        if tokens + n > batch_tokens {
            groups.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += n;
    }
    groups.push(current);
    groups.shuffle(&mut rng);

    groups
        .into_iter()
        .map(|idx| {
            let examples: Vec<&Example> = idx.iter().map(|&i| &split[i]).collect();
            Batch::from_examples(&examples, idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(src: Vec<usize>) -> Example {
        Example {
            tgt: src.clone(),
            src,
        }
    }

    #[test]
    fn ten_by_ten_into_fifty() {
        let split: Vec<Example> = (0..10).map(|i| ex(vec![4 + i; 10])).collect();
        let batches = make_batches(&split, 50, 3).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 5 && b.token_count == 50));
    }

    #[test]
    fn too_long_sequence_rejected() {
        let split = vec![ex(vec![5; 8])];
        assert!(matches!(make_batches(&split, 7, 0), Err(Error::Data(_))));
    }

    #[test]
    fn teacher_forcing_layout() {
        let split = [ex(vec![5, 6, 7]), ex(vec![8])];
        let b = Batch::from_examples(&[&split[0], &split[1]], vec![0, 1]).unwrap();
        assert_eq!(b.tgt_in.len, 4);
        assert_eq!(b.tgt_in.ids, vec![BOS, 5, 6, 7, BOS, 8, PAD, PAD]);
        assert_eq!(
            b.targets,
            vec![
                Some(5),
                Some(6),
                Some(7),
                Some(EOS),
                Some(8),
                Some(EOS),
                None,
                None
            ]
        );
        assert_eq!(b.src.ids, vec![5, 6, 7, 8, PAD, PAD]);
        assert_eq!(b.src_mask(), vec![true, true, true, true, false, false]);
        let masked: Vec<bool> = b.targets.iter().map(Option::is_some).collect();
        assert_eq!(b.tgt_mask(), masked);
        assert_eq!(b.token_count, 4);
    }
}
