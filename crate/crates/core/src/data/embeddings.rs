use std::path::Path;

use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::{Init, Rng, Tensor};

/// An embedding table initialized from pretrained vectors where available.
#[derive(Debug)]
pub struct PretrainedEmbeddings {
    pub table: Tensor,
    /// Fraction of vocabulary rows taken from the file.
    pub coverage: f64,
}

/// Parses whitespace-separated `token v1 .. vd` lines. Rows of tokens not in
/// the file (including specials) are drawn uniformly from (-0.1, 0.1).
pub fn parse_embeddings(text: &str, vocab: &Vocab, d_model: usize, seed: u64) -> Result<PretrainedEmbeddings> {
    let mut rng = Rng::derive(seed, streams::EMBEDDINGS, 0);
    let mut table = Tensor::new(&[vocab.len(), d_model], Init::Uniform(0.1, &mut rng))?;
    let mut covered = vec![false; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("embedding line {}: {e}", n + 1)))?;
        if values.len() != d_model {
            return Err(Error::shape(
                "load_embeddings",
                format!("line {} has {} values, d_model is {d_model}", n + 1, values.len()),
            ));
        }
        if let Some(id) = vocab.get(token) {
            table.data_mut()[id * d_model..(id + 1) * d_model].copy_from_slice(&values);
            covered[id] = true;
        }
    }
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / vocab.len().max(1) as f64;
    Ok(PretrainedEmbeddings { table, coverage })
}

pub fn load_embeddings(path: &Path, vocab: &Vocab, d_model: usize, seed: u64) -> Result<PretrainedEmbeddings> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let out = parse_embeddings(&text, vocab, d_model, seed)?;
    log::info!("embeddings {}: coverage {:.3}", path.display(), out.coverage);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::from_texts(["hello world"], 1)
    }

    #[test]
    fn no_overlap_is_random_with_zero_coverage() {
        let e = parse_embeddings("zebra 1 2 3\n", &vocab(), 3, 0).unwrap();
        assert_eq!(e.coverage, 0.0);
        assert!(e.table.data().iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn copies_file_rows() {
        let v = vocab();
        let line: Vec<String> = (0..50).map(|i| format!("{}", i as f64 * 0.01)).collect();
        let e = parse_embeddings(&format!("hello {}\n", line.join(" ")), &v, 50, 0).unwrap();
        let id = v.id("hello");
        let expected: Vec<f64> = (0..50).map(|i| i as f64 * 0.01).collect();
        assert_eq!(e.table.row(id), expected.as_slice());
        assert!((e.coverage - 1.0 / v.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn wrong_dimension_is_an_error() {
        let line = vec!["0.5"; 100].join(" ");
        let err = parse_embeddings(&format!("hello {line}"), &vocab(), 50, 0).unwrap_err();
        assert!(err.to_string().contains("100"));
    }
}
