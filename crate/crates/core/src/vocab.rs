//! Sparse bag-of-concepts vectors and the TF-IDF baseline featurization.
//!
//! TF-IDF uses the smoothed inverse document frequency
//! `idf[i] = ln((1 + n) / (1 + df[i])) + 1` followed by L2 normalization.

use std::io::{BufRead, Write};

use crate::corpus::ConceptDoc;
use crate::error::{Error, Result};

/// Coordinate-list vector: indices strictly increasing, no stored zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    dims: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    pub fn zeros(dims: usize) -> Self {
        SparseVector {
            dims,
            entries: Vec::new(),
        }
    }

    /// Builds from arbitrary `(index, value)` pairs: duplicates are summed,
    /// zeros dropped.
    pub fn from_pairs(dims: usize, mut pairs: Vec<(usize, f64)>) -> Result<Self> {
        if let Some(&(i, _)) = pairs.iter().find(|(i, _)| *i >= dims) {
            return Err(Error::Vocabulary { token: i, dims });
        }
        pairs.sort_by_key(|&(i, _)| i);
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (i, v) in pairs {
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        Ok(SparseVector { dims, entries })
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, v)| v * dense[i]).sum()
    }

    /// `dense += scale * self`
    pub fn add_scaled_to(&self, dense: &mut [f64], scale: f64) {
        for &(i, v) in &self.entries {
            dense[i] += scale * v;
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dims];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

/// Term counts of a document.
pub fn count_vector(doc: &ConceptDoc, dims: usize) -> Result<SparseVector> {
    doc.check_vocab(dims)?;
    let mut tokens: Vec<usize> = doc.tokens.iter().map(|&t| t as usize).collect();
    tokens.sort_unstable();
    let mut entries: Vec<(usize, f64)> = Vec::new();
    for t in tokens {
        match entries.last_mut() {
            Some(last) if last.0 == t => last.1 += 1.0,
            _ => entries.push((t, 1.0)),
        }
    }
    Ok(SparseVector { dims, entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    idf: Vec<f64>,
    num_docs: usize,
}

impl IdfTable {
    pub fn dims(&self) -> usize {
        self.idf.len()
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn values(&self) -> &[f64] {
        &self.idf
    }

    /// Writes `index<TAB>idf` lines, one per dimension. Values use the
    /// shortest representation that parses back to the same bits.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "# num_docs\t{}", self.num_docs)?;
        for (i, v) in self.idf.iter().enumerate() {
            writeln!(out, "{i}\t{v}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R, source: &str) -> Result<Self> {
        let mut idf = Vec::new();
        let mut num_docs = None;
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let at = || format!("{source}:{}", lineno + 1);
            if let Some(rest) = line.strip_prefix("# num_docs\t") {
                num_docs = Some(
                    rest.parse()
                        .map_err(|_| Error::format(at(), "bad document count"))?,
                );
                continue;
            }
            let (index, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(at(), "expected `index<TAB>idf`"))?;
            let index: usize = index
                .parse()
                .map_err(|_| Error::format(at(), format!("bad index `{index}`")))?;
            if index != idf.len() {
                return Err(Error::format(at(), format!("index {index} out of sequence")));
            }
            let value: f64 = value
                .parse()
                .map_err(|_| Error::format(at(), format!("bad idf `{value}`")))?;
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::format(at(), format!("idf {value} must be finite and >= 0")));
            }
            idf.push(value);
        }
        let num_docs = num_docs.ok_or_else(|| Error::format(source, "missing num_docs header"))?;
        Ok(IdfTable { idf, num_docs })
    }
}

pub fn fit_idf(docs: &[&ConceptDoc], dims: usize) -> Result<IdfTable> {
    if docs.is_empty() {
        return Err(Error::Fit("cannot fit idf on an empty corpus".into()));
    }
    let mut df = vec![0usize; dims];
    let mut seen = vec![usize::MAX; dims];
    for (d, doc) in docs.iter().enumerate() {
        doc.check_vocab(dims)?;
        for &t in &doc.tokens {
            let t = t as usize;
            if seen[t] != d {
                seen[t] = d;
                df[t] += 1;
            }
        }
    }
    let n = docs.len() as f64;
    let idf = df
        .iter()
        .map(|&f| ((1.0 + n) / (1.0 + f as f64)).ln() + 1.0)
        .collect();
    Ok(IdfTable {
        idf,
        num_docs: docs.len(),
    })
}

pub fn tfidf_vector(doc: &ConceptDoc, idf: &IdfTable) -> Result<SparseVector> {
    let mut v = count_vector(doc, idf.dims())?;
    for (i, x) in v.entries.iter_mut() {
        *x *= idf.idf[*i];
    }
    let norm = v.norm();
    if norm > 0.0 {
        for (_, x) in v.entries.iter_mut() {
            *x /= norm;
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(tokens: &[u32]) -> ConceptDoc {
        ConceptDoc::new(tokens.to_vec())
    }

    #[test]
    fn counts() {
        let v = count_vector(&doc(&[2, 2, 5]), 8).unwrap();
        assert_eq!(v.entries(), &[(2, 2.0), (5, 1.0)]);
        assert_eq!(count_vector(&doc(&[]), 8).unwrap().nnz(), 0);
        assert!(matches!(
            count_vector(&doc(&[8]), 8),
            Err(Error::Vocabulary { token: 8, dims: 8 })
        ));
    }

    #[test]
    fn counts_conserve_mass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let tokens: Vec<u32> = (0..100).map(|_| rng.gen_range(0..30)).collect();
        let v = count_vector(&doc(&tokens), 30).unwrap();
        assert_eq!(v.entries().iter().map(|e| e.1).sum::<f64>(), 100.0);
    }

    #[test]
    fn idf_smoothing() {
        let docs = [doc(&[0, 1]), doc(&[0]), doc(&[0, 0])];
        let refs: Vec<&ConceptDoc> = docs.iter().collect();
        let table = fit_idf(&refs, 3).unwrap();
        assert_eq!(table.values()[0], 1.0);
        assert!((table.values()[2] - 2.386_294_361_119_891).abs() < 1e-12);
        assert!((table.values()[1] - ((4.0f64 / 2.0).ln() + 1.0)).abs() < 1e-15);

        let single = [doc(&[1, 2])];
        let refs: Vec<&ConceptDoc> = single.iter().collect();
        let table = fit_idf(&refs, 3).unwrap();
        assert_eq!(table.values()[1], 1.0);
        assert_eq!(table.values()[2], 1.0);

        assert!(matches!(fit_idf(&[], 3), Err(Error::Fit(_))));
    }

    #[test]
    fn tfidf_examples() {
        let docs = [doc(&[0, 0])];
        let refs: Vec<&ConceptDoc> = docs.iter().collect();
        let table = fit_idf(&refs, 2).unwrap();
        let v = tfidf_vector(&doc(&[0, 0]), &table).unwrap();
        assert_eq!(v.entries(), &[(0, 1.0)]);
        assert_eq!(tfidf_vector(&doc(&[]), &table).unwrap().nnz(), 0);
        assert!(tfidf_vector(&doc(&[2]), &table).is_err());
    }

    #[test]
    fn tfidf_hand_table() {
        // docs: {0,0,1}, {1,2}, {2}; n = 3
        // df = [1, 2, 2]; idf = [ln(4/2)+1, ln(4/3)+1, ln(4/3)+1]
        let docs = [doc(&[0, 0, 1]), doc(&[1, 2]), doc(&[2])];
        let refs: Vec<&ConceptDoc> = docs.iter().collect();
        let table = fit_idf(&refs, 3).unwrap();
        let a = 2f64.ln() + 1.0; // 1.6931471805599454
        let b = (4.0f64 / 3.0).ln() + 1.0; // 1.2876820724517808
        let raw0 = [2.0 * a, b];
        let n0 = (raw0[0] * raw0[0] + raw0[1] * raw0[1]).sqrt();
        let v0 = tfidf_vector(&docs[0], &table).unwrap();
        assert!((v0.get(0) - raw0[0] / n0).abs() < 1e-12);
        assert!((v0.get(1) - raw0[1] / n0).abs() < 1e-12);
        // Hand evaluation: 3.386294361119891 / 3.622950... = 0.934702...
        assert!((v0.get(0) - 0.934_701_963_621_432_5).abs() < 1e-9);
        let v1 = tfidf_vector(&docs[1], &table).unwrap();
        let half = 0.5f64.sqrt();
        assert!((v1.get(1) - half).abs() < 1e-12 && (v1.get(2) - half).abs() < 1e-12);
        let v2 = tfidf_vector(&docs[2], &table).unwrap();
        assert_eq!(v2.entries(), &[(2, 1.0)]);
    }

    #[test]
    fn idf_file_round_trip() {
        let docs = [doc(&[0, 3, 3]), doc(&[1, 3])];
        let refs: Vec<&ConceptDoc> = docs.iter().collect();
        let table = fit_idf(&refs, 5).unwrap();
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        let back = IdfTable::read(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, table);
        assert!(IdfTable::read("0\tx\n".as_bytes(), "bad").is_err());
    }

    #[test]
    fn from_pairs_merges_and_drops_zeros() {
        let v = SparseVector::from_pairs(5, vec![(3, 1.0), (1, 2.0), (3, -1.0), (4, 0.5)]).unwrap();
        assert_eq!(v.entries(), &[(1, 2.0), (4, 0.5)]);
        assert!(SparseVector::from_pairs(2, vec![(2, 1.0)]).is_err());
    }
}
