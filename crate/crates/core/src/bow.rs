//! Vocabulary-tree bag-of-words retrieval, kept as the benchmark baseline.
//!
//! Descriptors are quantized by greedy descent through a hierarchical k-means
//! tree. Images become TF-IDF weighted sparse vectors with
//! `t_i = (n_id / n_d) * ln(N / N_i)`, L2 normalized, and are scored against
//! a query through an inverted file over the words they share.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::binio::{ByteReader, PutLe};
use crate::codebook::{train_codebook, CodebookError, KMeansParams};
use crate::descriptor::{DescriptorSet, DESCRIPTOR_DIM};
use crate::distance::l2_sq;
use crate::seed;

const TREE_MAGIC: &[u8; 4] = b"UVT1";
const DB_MAGIC: &[u8; 4] = b"UVB1";
const VERSION: u32 = 1;
const NO_WORD: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum BowError {
    #[error("need at least {branching} descriptors to split the root, got {count}")]
    TooFewDescriptors { count: usize, branching: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("database is empty")]
    EmptyDatabase,
    #[error("k-means failed: {0}")]
    KMeans(#[from] CodebookError),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    children: Vec<u32>,
    word: u32,
}

/// Hierarchical k-means tree; leaves are the visual words.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyTree {
    pub branching: usize,
    pub depth: usize,
    pub dim: usize,
    nodes: Vec<Node>,
    /// Node centers, `dim` values per node; the root's is unused.
    centers: Vec<f32>,
    words: usize,
}

impl VocabularyTree {
    pub fn word_count(&self) -> usize {
        self.words
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn center(&self, node: u32) -> &[f32] {
        &self.centers[node as usize * self.dim..(node as usize + 1) * self.dim]
    }

    /// Center of the leaf holding `word`.
    pub fn word_center(&self, word: u32) -> Option<&[f32]> {
        self.nodes.iter().position(|n| n.word == word).map(|i| self.center(i as u32))
    }

    /// Word for one descriptor: nearest child at every level, ties to the
    /// first child.
    pub fn quantize_row(&self, row: &[f32]) -> Result<u32, BowError> {
        if row.len() != self.dim {
            return Err(BowError::DimensionMismatch { expected: self.dim, actual: row.len() });
        }
        let mut node = 0u32;
        loop {
            let n = &self.nodes[node as usize];
            if n.children.is_empty() {
                return Ok(n.word);
            }
            let mut best = (n.children[0], f32::INFINITY);
            for &c in &n.children {
                let d = l2_sq(row, self.center(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            node = best.0;
        }
    }

    /// Sparse term counts `(word, n_id)` sorted by word.
    pub fn quantize_rows(&self, rows: &[f32]) -> Result<Vec<(u32, u32)>, BowError> {
        if self.dim == 0 || !rows.len().is_multiple_of(self.dim) {
            return Err(BowError::DimensionMismatch { expected: self.dim, actual: rows.len() % self.dim.max(1) });
        }
        let mut words = rows.chunks_exact(self.dim).map(|r| self.quantize_row(r)).collect::<Result<Vec<_>, _>>()?;
        words.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::new();
        for w in words {
            match out.last_mut() {
                Some(last) if last.0 == w => last.1 += 1,
                _ => out.push((w, 1)),
            }
        }
        Ok(out)
    }

    /// Checks the branching bound, leaf count and word numbering.
    pub fn audit(&self) -> Result<(), String> {
        let mut words = Vec::new();
        let mut stack = vec![(0u32, 0usize)];
        let mut reached = 0;
        while let Some((node, level)) = stack.pop() {
            reached += 1;
            if reached > self.nodes.len() {
                return Err("tree contains a cycle".into());
            }
            let n = &self.nodes[node as usize];
            if n.children.len() > self.branching {
                return Err(format!("node {node} has {} children", n.children.len()));
            }
            if level > self.depth {
                return Err(format!("node {node} below depth {}", self.depth));
            }
            if n.children.is_empty() {
                if n.word == NO_WORD {
                    return Err(format!("leaf {node} has no word"));
                }
                words.push(n.word);
            } else if n.word != NO_WORD {
                return Err(format!("internal node {node} carries a word"));
            }
            stack.extend(n.children.iter().map(|&c| (c, level + 1)));
        }
        if reached != self.nodes.len() {
            return Err("unreachable nodes".into());
        }
        words.sort_unstable();
        if words != (0..self.words as u32).collect::<Vec<_>>() {
            return Err("words are not numbered 0..V".into());
        }
        if (self.words as f64) > (self.branching as f64).powi(self.depth as i32) {
            return Err("more words than b^L".into());
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TREE_MAGIC);
        out.put_u32(VERSION);
        out.put_u32(self.branching as u32);
        out.put_u32(self.depth as u32);
        out.put_u32(self.dim as u32);
        out.put_u64(self.nodes.len() as u64);
        for (i, n) in self.nodes.iter().enumerate() {
            out.put_u32(n.word);
            out.put_u32(n.children.len() as u32);
            for &c in &n.children {
                out.put_u32(c);
            }
            out.put_f32s(self.center(i as u32));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BowError> {
        let mut r = ByteReader::new(bytes);
        let bad = |e: crate::binio::UnexpectedEof| BowError::Malformed(e.to_string());
        if &r.array::<4>().map_err(bad)? != TREE_MAGIC {
            return Err(BowError::Malformed("bad magic".into()));
        }
        if r.u32().map_err(bad)? != VERSION {
            return Err(BowError::Malformed("unsupported version".into()));
        }
        let branching = r.u32().map_err(bad)? as usize;
        let depth = r.u32().map_err(bad)? as usize;
        let dim = r.u32().map_err(bad)? as usize;
        let count = r.u64().map_err(bad)? as usize;
        if count == 0 {
            return Err(BowError::Malformed("tree without root".into()));
        }
        let mut nodes = Vec::with_capacity(count.min(1 << 20));
        let mut centers = Vec::new();
        let mut words = 0;
        for _ in 0..count {
            let word = r.u32().map_err(bad)?;
            let n = r.u32().map_err(bad)? as usize;
            let mut children = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let c = r.u32().map_err(bad)?;
                if c as usize >= count {
                    return Err(BowError::Malformed("child index out of range".into()));
                }
                children.push(c);
            }
            if word != NO_WORD {
                words += 1;
            }
            centers.extend(r.f32_vec(dim).map_err(bad)?);
            nodes.push(Node { children, word });
        }
        let tree = Self { branching, depth, dim, nodes, centers, words };
        tree.audit().map_err(BowError::Malformed)?;
        Ok(tree)
    }

    pub fn save(&self, path: &Path) -> Result<(), BowError> {
        fs::write(path, self.encode()).map_err(|source| io_err(path, source))
    }

    pub fn load(path: &Path) -> Result<Self, BowError> {
        Self::decode(&fs::read(path).map_err(|source| io_err(path, source))?)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> BowError {
    BowError::Io { path: path.display().to_string(), source }
}

/// Builds a tree with branching `b` and depth `l` by recursive k-means.
/// Nodes with fewer than `b` descriptors become leaves early.
pub fn train_vocabulary(data: &[f32], dim: usize, b: usize, l: usize, seed: u64) -> Result<VocabularyTree, BowError> {
    if b < 2 {
        return Err(BowError::InvalidParameter(format!("branching must be >= 2, got {b}")));
    }
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(BowError::InvalidParameter("data is not a whole number of rows".into()));
    }
    let n = data.len() / dim;
    if l > 0 && n < b {
        return Err(BowError::TooFewDescriptors { count: n, branching: b });
    }
    let mut tree = VocabularyTree {
        branching: b,
        depth: l,
        dim,
        nodes: vec![Node { children: Vec::new(), word: NO_WORD }],
        centers: vec![0.0; dim],
        words: 0,
    };
    let all: Vec<u32> = (0..n as u32).collect();
    split(&mut tree, data, 0, &all, 0, seed)?;
    Ok(tree)
}

fn split(tree: &mut VocabularyTree, data: &[f32], node: u32, members: &[u32], level: usize, seed: u64) -> Result<(), BowError> {
    let dim = tree.dim;
    let b = tree.branching;
    if level == tree.depth || members.len() < b {
        tree.nodes[node as usize].word = tree.words as u32;
        tree.words += 1;
        return Ok(());
    }
    let rows: Vec<f32> = members.iter().flat_map(|&i| data[i as usize * dim..(i as usize + 1) * dim].iter().copied()).collect();
    let params = KMeansParams::new(b, seed::derive(seed, &format!("vocab-node-{node}")));
    let codebook = train_codebook(&rows, dim, &params)?;
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); b];
    for (row, &m) in rows.chunks_exact(dim).zip(members) {
        groups[codebook.nearest_unchecked(row).0].push(m);
    }
    for (j, group) in groups.into_iter().enumerate() {
        let child = tree.nodes.len() as u32;
        tree.nodes.push(Node { children: Vec::new(), word: NO_WORD });
        tree.centers.extend_from_slice(codebook.center(j));
        tree.nodes[node as usize].children.push(child);
        split(tree, data, child, &group, level + 1, seed)?;
    }
    Ok(())
}

/// Term counts for one image, `(word, n_id)` sorted by word.
pub fn quantize_image(tree: &VocabularyTree, set: &DescriptorSet) -> Result<Vec<(u32, u32)>, BowError> {
    if tree.dim != DESCRIPTOR_DIM {
        return Err(BowError::DimensionMismatch { expected: DESCRIPTOR_DIM, actual: tree.dim });
    }
    tree.quantize_rows(&set.unit_descriptors())
}

/// Sparse TF-IDF vector, `(word, weight)` sorted by word.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVector {
    pub image_id: u64,
    pub weights: Vec<(u32, f64)>,
    /// No word had a positive weight; the vector is all zeros.
    pub degenerate: bool,
}

impl BowVector {
    pub fn dot(&self, other: &BowVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.weights.len() && j < other.weights.len() {
            let (a, b) = (self.weights[i], other.weights[j]);
            match a.0.cmp(&b.0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a.1 * b.1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posting {
    /// Position of the image in the database.
    pub image: u32,
    pub count: u32,
    pub weight: f64,
}

/// Word-indexed postings plus the per-image vectors they were built from.
#[derive(Debug, Clone, PartialEq)]
pub struct BowDatabase {
    pub vocabulary_size: usize,
    pub image_ids: Vec<u64>,
    /// `N_i`: number of images containing each word.
    pub document_frequency: Vec<u32>,
    pub idf: Vec<f64>,
    pub postings: Vec<Vec<Posting>>,
    pub vectors: Vec<BowVector>,
}

fn tfidf(image_id: u64, counts: &[(u32, u32)], idf: &[f64]) -> BowVector {
    let n_d: u64 = counts.iter().map(|c| c.1 as u64).sum();
    let mut weights: Vec<(u32, f64)> = counts
        .iter()
        .map(|&(w, n)| (w, n as f64 / n_d as f64 * idf[w as usize]))
        .filter(|&(_, t)| t > 0.0)
        .collect();
    let norm = weights.iter().map(|w| w.1 * w.1).sum::<f64>().sqrt();
    let degenerate = norm == 0.0;
    if !degenerate {
        weights.iter_mut().for_each(|w| w.1 /= norm);
    }
    BowVector { image_id, weights, degenerate }
}

/// Builds the database from per-image term counts.
pub fn build_from_counts(
    vocabulary_size: usize,
    images: &[(u64, Vec<(u32, u32)>)],
) -> Result<BowDatabase, BowError> {
    if images.is_empty() {
        return Err(BowError::EmptyDatabase);
    }
    let mut df = vec![0u32; vocabulary_size];
    for (_, counts) in images {
        for &(w, _) in counts {
            let slot = df.get_mut(w as usize).ok_or_else(|| {
                BowError::InvalidParameter(format!("word {w} outside vocabulary of {vocabulary_size}"))
            })?;
            *slot += 1;
        }
    }
    let n = images.len() as f64;
    let idf: Vec<f64> = df.iter().map(|&d| if d == 0 { 0.0 } else { (n / d as f64).ln() }).collect();
    let mut postings: Vec<Vec<Posting>> = vec![Vec::new(); vocabulary_size];
    let mut vectors = Vec::with_capacity(images.len());
    // Postings come out sorted by image id when images are visited in id order.
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by_key(|&i| images[i].0);
    for pos in order {
        let (id, counts) = &images[pos];
        let v = tfidf(*id, counts, &idf);
        let mut wi = 0;
        for &(w, c) in counts {
            while wi < v.weights.len() && v.weights[wi].0 < w {
                wi += 1;
            }
            let weight = if wi < v.weights.len() && v.weights[wi].0 == w { v.weights[wi].1 } else { 0.0 };
            postings[w as usize].push(Posting { image: pos as u32, count: c, weight });
        }
        vectors.push((pos, v));
    }
    vectors.sort_by_key(|(pos, _)| *pos);
    Ok(BowDatabase {
        vocabulary_size,
        image_ids: images.iter().map(|i| i.0).collect(),
        document_frequency: df,
        idf,
        postings,
        vectors: vectors.into_iter().map(|(_, v)| v).collect(),
    })
}

/// Quantizes every set against `tree` and builds the database.
pub fn build_bow_database(tree: &VocabularyTree, sets: &[DescriptorSet]) -> Result<BowDatabase, BowError> {
    let counts = sets
        .iter()
        .map(|s| Ok((s.image_id, quantize_image(tree, s)?)))
        .collect::<Result<Vec<_>, BowError>>()?;
    build_from_counts(tree.word_count(), &counts)
}

impl BowDatabase {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Weights an external image with this database's IDF values.
    pub fn query_vector(&self, image_id: u64, counts: &[(u32, u32)]) -> Result<BowVector, BowError> {
        if let Some(&(w, _)) = counts.iter().find(|c| c.0 as usize >= self.vocabulary_size) {
            return Err(BowError::InvalidParameter(format!("word {w} outside vocabulary")));
        }
        Ok(tfidf(image_id, counts, &self.idf))
    }

    /// Every image's similarity to `query`, accumulated over shared words.
    pub fn scores(&self, query: &BowVector) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.len()];
        for &(w, qw) in &query.weights {
            for p in &self.postings[w as usize] {
                acc[p.image as usize] += qw * p.weight;
            }
        }
        acc
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        out.put_u32(VERSION);
        out.put_u64(self.vocabulary_size as u64);
        out.put_u64(self.len() as u64);
        for &id in &self.image_ids {
            out.put_u64(id);
        }
        for list in &self.postings {
            out.put_u32(list.len() as u32);
            for p in list {
                out.put_u32(p.image);
                out.put_u32(p.count);
            }
        }
        out
    }

    /// Rebuilds the database from the stored term counts.
    pub fn decode(bytes: &[u8]) -> Result<Self, BowError> {
        let mut r = ByteReader::new(bytes);
        let bad = |e: crate::binio::UnexpectedEof| BowError::Malformed(e.to_string());
        if &r.array::<4>().map_err(bad)? != DB_MAGIC {
            return Err(BowError::Malformed("bad magic".into()));
        }
        if r.u32().map_err(bad)? != VERSION {
            return Err(BowError::Malformed("unsupported version".into()));
        }
        let v = r.u64().map_err(bad)? as usize;
        let n = r.u64().map_err(bad)? as usize;
        if v > r.remaining() / 4 || n > r.remaining() / 8 {
            return Err(BowError::Malformed("sizes exceed file length".into()));
        }
        let mut images: Vec<(u64, Vec<(u32, u32)>)> = Vec::with_capacity(n);
        for _ in 0..n {
            images.push((r.u64().map_err(bad)?, Vec::new()));
        }
        for w in 0..v as u32 {
            let len = r.u32().map_err(bad)?;
            for _ in 0..len {
                let image = r.u32().map_err(bad)? as usize;
                let count = r.u32().map_err(bad)?;
                images.get_mut(image).ok_or_else(|| BowError::Malformed("posting out of range".into()))?.1.push((w, count));
            }
        }
        build_from_counts(v, &images)
    }

    pub fn save(&self, path: &Path) -> Result<(), BowError> {
        fs::write(path, self.encode()).map_err(|source| io_err(path, source))
    }

    pub fn load(path: &Path) -> Result<Self, BowError> {
        Self::decode(&fs::read(path).map_err(|source| io_err(path, source))?)
    }
}

/// Top `topk` images by similarity, ties to the lower image id.
pub fn bow_query(db: &BowDatabase, query: &BowVector, topk: usize) -> Result<Vec<(u64, f64)>, BowError> {
    if db.is_empty() {
        return Err(BowError::EmptyDatabase);
    }
    let scores = db.scores(query);
    let mut ranked: Vec<(u64, f64)> = db.image_ids.iter().copied().zip(scores).collect();
    let cmp = |a: &(u64, f64), b: &(u64, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if topk < ranked.len() {
        ranked.select_nth_unstable_by(topk, cmp);
        ranked.truncate(topk);
    }
    ranked.sort_by(cmp);
    Ok(ranked)
}
