//! Padded mini-batch assembly and train/dev splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD_ID};
use super::{ReviewExample, ToweExample};

/// Label value stored at padded cells; every loss masks these out.
pub const IGNORE_LABEL: usize = usize::MAX;

/// A padded batch of TOWE examples. All matrices are `[batch][max_len]`;
/// padded cells hold `PAD_ID` / position 0 / `IGNORE_LABEL`.
pub struct ToweBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub positions: Vec<Vec<usize>>,
    pub labels: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    /// Index of each row in the example list the batch was built from.
    pub example_ids: Vec<usize>,
}

impl ToweBatch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids[0].len()
    }

    /// Step-major validity view: mask[t][row], as the recurrences consume it.
    pub fn step_mask(&self) -> Vec<Vec<bool>> {
        transpose_mask(&self.mask)
    }
}

pub struct ReviewBatch {
    pub token_ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub polarities: Vec<usize>,
}

impl ReviewBatch {
    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids[0].len()
    }

    pub fn step_mask(&self) -> Vec<Vec<bool>> {
        transpose_mask(&self.mask)
    }
}

fn transpose_mask(mask: &[Vec<bool>]) -> Vec<Vec<bool>> {
    let t = mask[0].len();
    (0..t).map(|j| mask.iter().map(|row| row[j]).collect()).collect()
}

fn shuffled_order(n: usize, shuffle_seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Chops examples into batches of `batch_size` (the last may be short),
/// shuffling first when a seed is given. Padding fills each batch to its
/// own max length.
pub fn make_towe_batches(
    examples: &[ToweExample],
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<ToweBatch> {
    assert!(batch_size >= 1);
    let order = shuffled_order(examples.len(), shuffle_seed);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let max_len = chunk.iter().map(|&i| examples[i].len()).max().unwrap();
            let mut batch = ToweBatch {
                token_ids: Vec::with_capacity(chunk.len()),
                positions: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
                mask: Vec::with_capacity(chunk.len()),
                lengths: Vec::with_capacity(chunk.len()),
                spans: Vec::with_capacity(chunk.len()),
                example_ids: chunk.to_vec(),
            };
            for &i in chunk {
                let ex = &examples[i];
                let n = ex.len();
                let mut ids = vocab.ids_for(&ex.tokens);
                ids.resize(max_len, PAD_ID);
                let mut pos = ex.position_indices.clone();
                pos.resize(max_len, 0);
                let mut labels: Vec<usize> = ex.bio_labels.iter().map(|&b| b as usize).collect();
                labels.resize(max_len, IGNORE_LABEL);
                let mut mask = vec![true; n];
                mask.resize(max_len, false);
                batch.token_ids.push(ids);
                batch.positions.push(pos);
                batch.labels.push(labels);
                batch.mask.push(mask);
                batch.lengths.push(n);
                batch.spans.push(ex.target_span);
            }
            batch
        })
        .collect()
}

pub fn make_review_batches(
    reviews: &[ReviewExample],
    vocab: &Vocab,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Vec<ReviewBatch> {
    assert!(batch_size >= 1);
    let order = shuffled_order(reviews.len(), shuffle_seed);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let max_len = chunk.iter().map(|&i| reviews[i].tokens.len()).max().unwrap();
            let mut batch = ReviewBatch {
                token_ids: Vec::with_capacity(chunk.len()),
                mask: Vec::with_capacity(chunk.len()),
                lengths: Vec::with_capacity(chunk.len()),
                polarities: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let r = &reviews[i];
                let n = r.tokens.len();
                let mut ids = vocab.ids_for(&r.tokens);
                ids.resize(max_len, PAD_ID);
                let mut mask = vec![true; n];
                mask.resize(max_len, false);
                batch.token_ids.push(ids);
                batch.mask.push(mask);
                batch.lengths.push(n);
                batch.polarities.push(r.polarity);
            }
            batch
        })
        .collect()
}

/// Deterministic shuffled split into (train, dev); dev gets
/// round(n * fraction) examples, and both sides stay nonempty.
pub fn split_validation<T: Clone>(examples: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(fraction > 0.0 && fraction < 1.0, "fraction must be in (0,1)");
    assert!(examples.len() >= 2, "need at least one example per side");
    let order = shuffled_order(examples.len(), Some(seed));
    let n_dev = ((examples.len() as f64 * fraction).round() as usize)
        .clamp(1, examples.len() - 1);
    let dev = order[..n_dev].iter().map(|&i| examples[i].clone()).collect();
    let train = order[n_dev..].iter().map(|&i| examples[i].clone()).collect();
    (train, dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Bio, UNK_ID};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Vocab::from_entries(
            vec![
                ("the".into(), vec![0.1, 0.1]),
                ("fish".into(), vec![0.2, 0.2]),
                ("fresh".into(), vec![0.3, 0.3]),
            ],
            2,
            &mut rng,
        )
    }

    fn example(tokens: &[&str], span: (usize, usize)) -> ToweExample {
        let n = tokens.len();
        let mut bio = vec![Bio::O; n];
        bio[n - 1] = Bio::B;
        ToweExample {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            target_span: span,
            bio_labels: bio,
            position_indices: crate::corpus::positions(n, span, 100),
            pos_tags: None,
        }
    }

    #[test]
    fn batch_count_splits_like_51_over_25() {
        let examples: Vec<ToweExample> = (0..51).map(|_| example(&["the", "fish"], (0, 0))).collect();
        let batches = make_towe_batches(&examples, &vocab(), 25, Some(7));
        let sizes: Vec<usize> = batches.iter().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![25, 25, 1]);
    }

    #[test]
    fn padding_carries_pad_id_and_ignore_label() {
        let examples = vec![
            example(&["the", "fish", "fresh"], (1, 1)),
            example(&["fresh", "unseen-token"], (0, 0)),
        ];
        let batches = make_towe_batches(&examples, &vocab(), 2, None);
        let b = &batches[0];
        assert_eq!(b.max_len(), 3);
        assert_eq!(b.mask[1], vec![true, true, false]);
        assert_eq!(b.token_ids[1][1], UNK_ID);
        assert_eq!(b.token_ids[1][2], PAD_ID);
        assert_eq!(b.labels[1][2], IGNORE_LABEL);
        assert_eq!(b.lengths, vec![3, 2]);
        // step-major mask transposes row-major
        assert_eq!(b.step_mask()[2], vec![true, false]);
    }

    #[test]
    fn same_seed_means_same_order() {
        let examples: Vec<ToweExample> = (0..30)
            .map(|i| example(if i % 2 == 0 { &["the", "fish"] } else { &["fresh"] }, (0, 0)))
            .collect();
        let a = make_towe_batches(&examples, &vocab(), 8, Some(42));
        let b = make_towe_batches(&examples, &vocab(), 8, Some(42));
        let ids =
            |bs: &[ToweBatch]| bs.iter().flat_map(|x| x.example_ids.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let c = make_towe_batches(&examples, &vocab(), 8, Some(43));
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic() {
        let items: Vec<usize> = (0..100).collect();
        let (train, dev) = split_validation(&items, 0.2, 9);
        assert_eq!(train.len(), 80);
        assert_eq!(dev.len(), 20);
        let mut all: Vec<usize> = train.iter().chain(dev.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        let (train2, dev2) = split_validation(&items, 0.2, 9);
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
    }

    #[test]
    fn review_batches_pad_and_keep_polarity() {
        let reviews = vec![
            ReviewExample { tokens: vec!["fresh".into()], polarity: 1 },
            ReviewExample { tokens: vec!["the".into(), "fish".into()], polarity: 0 },
        ];
        let batches = make_review_batches(&reviews, &vocab(), 4, None);
        let b = &batches[0];
        assert_eq!(b.polarities, vec![1, 0]);
        assert_eq!(b.mask[0], vec![true, false]);
        assert_eq!(b.token_ids[0][1], PAD_ID);
    }
}
