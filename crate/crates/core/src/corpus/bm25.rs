use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk: u32,
    pub tf: u32,
}

/// Okapi BM25 over tokenized chunks. Chunk positions double as chunk ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    postings: BTreeMap<String, Vec<Posting>>,
    lengths: Vec<u32>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn build<I>(docs: I, params: Bm25Params) -> Self
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut lengths = Vec::new();
        for (i, tokens) in docs.into_iter().enumerate() {
            lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, n) in tf {
                postings.entry(term).or_default().push(Posting { chunk: i as u32, tf: n });
            }
        }
        let total: u64 = lengths.iter().map(|&l| l as u64).sum();
        let avg_len = if lengths.is_empty() { 0.0 } else { total as f64 / lengths.len() as f64 };
        Self { params, postings, lengths, avg_len }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_chunks(&self) -> usize {
        self.lengths.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn chunk_len(&self, chunk: usize) -> u32 {
        self.lengths[chunk]
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_chunks() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, len: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = tf as f64;
        let norm = 1.0 - b + b * len as f64 / self.avg_len;
        idf * (tf * (k1 + 1.0)) / (tf + k1 * norm)
    }

    /// Sum over query term occurrences; repeated query terms count again.
    pub fn score(&self, query_terms: &[String], chunk: usize) -> f64 {
        let len = self.lengths[chunk];
        let mut total = 0.0;
        for term in query_terms {
            let tf = self
                .postings(term)
                .binary_search_by_key(&(chunk as u32), |p| p.chunk)
                .map(|i| self.postings(term)[i].tf)
                .unwrap_or(0);
            if tf > 0 {
                total += self.term_weight(self.idf(term), tf, len);
            }
        }
        total
    }

    /// Top-k chunks with positive score, (score desc, chunk asc).
    pub fn search(&self, query_terms: &[String], k: usize) -> Vec<(usize, f64)> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in query_terms {
            let idf = self.idf(term);
            for p in self.postings(term) {
                *acc.entry(p.chunk).or_insert(0.0) += self.term_weight(idf, p.tf, self.lengths[p.chunk as usize]);
            }
        }
        let mut hits: Vec<(usize, f64)> =
            acc.into_iter().filter(|&(_, s)| s > 0.0).map(|(c, s)| (c as usize, s)).collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn idf_uses_plus_one_variant() {
        let idx = Bm25Index::build(vec![toks("a b"), toks("a c"), toks("d")], Bm25Params::default());
        let expected = (1.0f64 + (3.0 - 2.0 + 0.5) / (2.0 + 0.5)).ln();
        assert!((idx.idf("a") - expected).abs() < 1e-15);
        assert!(idx.idf("zzz") > idx.idf("a"));
    }

    #[test]
    fn repeated_query_term_counts_twice() {
        let idx = Bm25Index::build(vec![toks("a b"), toks("c")], Bm25Params::default());
        let once = idx.score(&toks("a"), 0);
        let twice = idx.score(&toks("a a"), 0);
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = Bm25Index::build(Vec::<Vec<String>>::new(), Bm25Params::default());
        assert!(idx.search(&toks("a"), 5).is_empty());
    }
}
