//! Vocabulary over pretrained word vectors. Ids 0 and 1 are reserved for
//! padding and unknown tokens; their vectors are drawn at build time and,
//! like the loaded vectors, never trained.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use lotn_autograd::Tensor;
use rand::Rng;

use super::{malformed, read_file, CorpusError};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    matrix: Tensor,
    dim: usize,
}

impl Vocab {
    /// Builds from (token, vector) entries; ids follow entry order after
    /// the two reserved slots, whose vectors come from U(-0.01, 0.01).
    pub fn from_entries<R: Rng>(
        entries: Vec<(String, Vec<f64>)>,
        dim: usize,
        rng: &mut R,
    ) -> Vocab {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut flat: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-0.01..0.01)).collect();
        for (token, vector) in entries {
            debug_assert_eq!(vector.len(), dim);
            tokens.push(token);
            flat.extend(vector);
        }
        let matrix = Tensor::from_vec(vec![tokens.len(), dim], flat).expect("consistent dims");
        Vocab::assemble(tokens, matrix, dim)
    }

    /// Rebuilds from checkpointed parts (token list + embedding matrix).
    pub fn from_parts(tokens: Vec<String>, matrix: Tensor) -> Vocab {
        assert_eq!(tokens[PAD_ID], PAD_TOKEN);
        assert_eq!(tokens[UNK_ID], UNK_TOKEN);
        assert_eq!(matrix.rows(), tokens.len());
        let dim = matrix.cols();
        Vocab::assemble(tokens, matrix, dim)
    }

    fn assemble(tokens: Vec<String>, matrix: Tensor, dim: usize) -> Vocab {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids, matrix, dim }
    }

    /// Lookup is lowercased; absent tokens map to UNK.
    pub fn id_of(&self, token: &str) -> usize {
        let lowered = token.to_lowercase();
        self.ids.get(&lowered).copied().unwrap_or(UNK_ID)
    }

    pub fn ids_for(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_of(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Frozen `[len, dim]` embedding table.
    pub fn embeddings(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries always exist
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Loads word vectors, keeping only tokens in `keep` (the union of corpus
/// vocabularies, lowercased). Duplicate tokens: first occurrence wins with
/// a warning on stderr.
pub fn load_embeddings<R: Rng>(
    path: &Path,
    dim: usize,
    keep: &HashSet<String>,
    rng: &mut R,
) -> Result<Vocab, CorpusError> {
    let text = read_file(path)?;
    let mut seen: HashSet<&str> = HashSet::new();
    let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        if !keep.contains(token) {
            continue;
        }
        if !seen.insert(token) {
            eprintln!("warning: {}:{line_no}: duplicate vector for {token:?}, keeping the first", path.display());
            continue;
        }
        let vector: Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let vector = vector.map_err(|e| malformed(path, line_no, format!("bad value: {e}")))?;
        if vector.len() != dim {
            return Err(malformed(
                path,
                line_no,
                format!("{} values for {dim}-dim vectors", vector.len()),
            ));
        }
        entries.push((token.to_string(), vector));
    }
    Ok(Vocab::from_entries(entries, dim, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn keep(tokens: &[&str]) -> HashSet<String> {
        tokens.iter().map(|t| t.to_string()).collect()
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_vectors_and_reserves_ids() {
        let f = write_temp("good 0.1 0.2\nbad -0.3 0.4\nskipme 9 9\n");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = load_embeddings(f.path(), 2, &keep(&["good", "bad"]), &mut rng).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id_of("good"), 2);
        assert_eq!(v.id_of("bad"), 3);
        assert_eq!(v.id_of("absent"), UNK_ID);
        assert_eq!(v.token(PAD_ID), PAD_TOKEN);
        assert!(!v.embeddings().requires_grad(), "loaded vectors are frozen");
        let m = v.embeddings().to_vec();
        assert_eq!(&m[4..6], &[0.1, 0.2]);
    }

    #[test]
    fn lookup_is_lowercased() {
        let f = write_temp("great 1 2\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = load_embeddings(f.path(), 2, &keep(&["great"]), &mut rng).unwrap();
        assert_eq!(v.id_of("Great"), v.id_of("great"));
    }

    #[test]
    fn reserved_vectors_are_small_random() {
        let f = write_temp("x 1 1 1\n");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = load_embeddings(f.path(), 3, &keep(&["x"]), &mut rng).unwrap();
        let m = v.embeddings().to_vec();
        for &val in &m[..6] {
            assert!(val.abs() < 0.01 && val != 0.0);
        }
    }

    #[test]
    fn duplicate_keeps_first() {
        let f = write_temp("tok 1 1\ntok 2 2\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = load_embeddings(f.path(), 2, &keep(&["tok"]), &mut rng).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(&v.embeddings().to_vec()[4..6], &[1.0, 1.0]);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let f = write_temp("ok 1 2\nbroken 1 2 3\n");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = load_embeddings(f.path(), 2, &keep(&["ok", "broken"]), &mut rng).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn parts_round_trip() {
        let f = write_temp("a 1 2\nb 3 4\n");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = load_embeddings(f.path(), 2, &keep(&["a", "b"]), &mut rng).unwrap();
        let rebuilt = Vocab::from_parts(v.tokens().to_vec(), v.embeddings().clone());
        assert_eq!(rebuilt.id_of("b"), v.id_of("b"));
        assert_eq!(rebuilt.embeddings().to_vec(), v.embeddings().to_vec());
    }
}
