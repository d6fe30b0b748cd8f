//! Synthetic transduction corpus with future-context dependence.
//!
//! Each symbol owns a random embedding; every frame of a token mixes in a
//! fraction `γ` of the next token's embedding. Ambiguous pairs share one base
//! embedding, and the grammar ties the pair member to the next symbol: the
//! first member is always followed by a low-half symbol, the second by a
//! high-half one. Telling the two apart therefore needs future frames.
//!
//! Consecutive repeats are not generated: with next-symbol mixing, a repeated
//! symbol has no visible boundary.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_symbols: usize,
    pub feat_dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub ambiguous_pairs: usize,
    /// Sampling weight of ambiguous symbols relative to the others.
    pub ambiguous_boost: f64,
    /// Seeds the symbol embeddings; shared by every split of one corpus.
    pub embedding_seed: u64,
    /// Seeds the utterance stream.
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_symbols: 16,
            feat_dim: 16,
            min_duration: 1,
            max_duration: 4,
            min_length: 4,
            max_length: 12,
            gamma: 0.4,
            sigma: 0.3,
            ambiguous_pairs: 4,
            ambiguous_boost: 1.0,
            embedding_seed: 1234,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor<f32>,
    pub tokens: Vec<usize>,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.n_symbols < 2 || self.feat_dim == 0 {
            return bad("need n_symbols >= 2 and feat_dim >= 1");
        }
        if self.min_duration < 1 || self.min_duration > self.max_duration {
            return bad("durations must satisfy 1 <= min_duration <= max_duration");
        }
        if self.min_length < 1 || self.min_length > self.max_length {
            return bad("lengths must satisfy 1 <= min_length <= max_length");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.sigma >= 0.0) || !(self.ambiguous_boost > 0.0) {
            return bad("sigma must be >= 0 and ambiguous_boost > 0");
        }
        if self.ambiguous_pairs * 2 > self.n_symbols {
            return bad("ambiguous_pairs must be <= n_symbols / 2");
        }
        let half = self.low_half();
        let mut seen = vec![false; self.n_symbols + 1];
        for (a, b) in self.pairs() {
            if b > self.n_symbols || seen[a] || seen[b] || ((a <= half) != (b <= half)) {
                return bad("ambiguous pairs do not fit this alphabet (use an even half size)");
            }
            seen[a] = true;
            seen[b] = true;
        }
        let states = std::iter::once(None).chain((1..=self.n_symbols).map(Some));
        for prev in states {
            if self.successors(prev, false).is_empty() || self.successors(prev, true).is_empty() {
                return bad("grammar leaves a symbol without successors");
            }
        }
        Ok(())
    }

    /// Symbols `1..=half` form the low half.
    pub fn low_half(&self) -> usize {
        self.n_symbols / 2
    }

    /// Ambiguous pairs, placed alternately in the low and high halves.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let half = self.low_half();
        (0..self.ambiguous_pairs)
            .map(|i| {
                let base = if i % 2 == 0 { 1 + i } else { half + i };
                (base, base + 1)
            })
            .collect()
    }

    fn pair_role(&self, s: usize) -> Option<(usize, bool)> {
        self.pairs().into_iter().enumerate().find_map(|(i, (a, b))| {
            if s == a {
                Some((i, true))
            } else if s == b {
                Some((i, false))
            } else {
                None
            }
        })
    }

    pub fn is_ambiguous(&self, s: usize) -> bool {
        self.pair_role(s).is_some()
    }

    /// Base embeddings `[n_symbols + 1, feat_dim]`; row 0 (blank) is unused
    /// and pair members share a row.
    pub fn embeddings(&self) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.embedding_seed);
        let f = self.feat_dim;
        let mut data = vec![0.0; (self.n_symbols + 1) * f];
        for s in 1..=self.n_symbols {
            let row: Vec<f64> = (0..f).map(|_| StandardNormal.sample(&mut rng)).collect();
            data[s * f..(s + 1) * f].copy_from_slice(&row);
        }
        for (a, b) in self.pairs() {
            let src = data[a * f..(a + 1) * f].to_vec();
            data[b * f..(b + 1) * f].copy_from_slice(&src);
        }
        Tensor::new(vec![self.n_symbols + 1, f], data)
    }

    /// Symbols allowed after `prev` (`None` at the start).
    fn successors(&self, prev: Option<usize>, last: bool) -> Vec<usize> {
        let half = self.low_half();
        (1..=self.n_symbols)
            .filter(|&s| Some(s) != prev)
            .filter(|&s| match prev.and_then(|p| self.pair_role(p)) {
                Some((_, true)) => s <= half,
                Some((_, false)) => s > half,
                None => true,
            })
            .filter(|&s| !(last && self.is_ambiguous(s)))
            .collect()
    }
}

fn pick<R: Rng>(rng: &mut R, cfg: &CorpusConfig, options: &[usize]) -> usize {
    let w = |s: usize| if cfg.is_ambiguous(s) { cfg.ambiguous_boost } else { 1.0 };
    let total: f64 = options.iter().map(|&s| w(s)).sum();
    let mut x = rng.gen_range(0.0..total);
    for &s in options {
        x -= w(s);
        if x < 0.0 {
            return s;
        }
    }
    *options.last().expect("non-empty successor set")
}

/// One utterance and its per-token durations.
pub fn generate_utterance<R: Rng>(
    rng: &mut R,
    cfg: &CorpusConfig,
    emb: &Tensor<f64>,
    id: String,
) -> (Utterance, Vec<usize>) {
    let n = rng.gen_range(cfg.min_length..=cfg.max_length);
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let options = cfg.successors(tokens.last().copied(), i + 1 == n);
        tokens.push(pick(rng, cfg, &options));
    }
    let durations: Vec<usize> = (0..n)
        .map(|_| rng.gen_range(cfg.min_duration..=cfg.max_duration))
        .collect();
    let f = cfg.feat_dim;
    let noise = Normal::new(0.0, cfg.sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let total: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(total * f);
    for (i, (&tok, &d)) in tokens.iter().zip(&durations).enumerate() {
        let cur = emb.row(tok);
        let next = tokens.get(i + 1).map(|&s| emb.row(s));
        for _ in 0..d {
            for c in 0..f {
                let nx = next.map_or(0.0, |r| r[c]);
                let eps = if cfg.sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(((1.0 - cfg.gamma) * cur[c] + cfg.gamma * nx + eps) as f32);
            }
        }
    }
    (
        Utterance {
            id,
            features: Tensor::new(vec![total, f], data),
            tokens,
        },
        durations,
    )
}

/// Deterministic utterance stream for `cfg.seed`.
pub fn generate_utterances(cfg: &CorpusConfig, n: usize) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let emb = cfg.embeddings();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..n)
        .map(|i| generate_utterance(&mut rng, cfg, &emb, format!("s{}-{i:06}", cfg.seed)).0)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub frames: usize,
    pub tokens: Vec<usize>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes `dir/manifest.jsonl` and `dir/feats/<id>.f32`; returns the
/// manifest path.
pub fn generate_corpus(cfg: &CorpusConfig, n: usize, dir: &Path) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Config("corpus size must be >= 1".into()));
    }
    let utts = generate_utterances(cfg, n)?;
    write_corpus(&utts, dir)
}

pub fn write_corpus(utts: &[Utterance], dir: &Path) -> Result<PathBuf> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for u in utts {
        let rel = format!("feats/{}.f32", u.id);
        let path = dir.join(&rel);
        let bytes: Vec<u8> = u.features.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            id: u.id.clone(),
            path: rel,
            frames: u.features.rows(),
            tokens: u.tokens.clone(),
        };
        let line = serde_json::to_string(&entry).expect("manifest entries serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Utterances of a manifest in file order.
pub struct ManifestReader {
    lines: std::io::Lines<BufReader<fs::File>>,
    base: PathBuf,
    manifest: PathBuf,
    feat_dim: usize,
}

pub fn load_manifest(path: &Path, feat_dim: usize) -> Result<ManifestReader> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(ManifestReader {
        lines: BufReader::new(file).lines(),
        base: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        manifest: path.to_path_buf(),
        feat_dim,
    })
}

/// Reads a whole manifest into memory.
pub fn load_all(path: &Path, feat_dim: usize) -> Result<Vec<Utterance>> {
    load_manifest(path, feat_dim)?.collect()
}

impl ManifestReader {
    fn read_entry(&self, line: &str) -> Result<Utterance> {
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::Config(format!("{}: bad manifest line: {err}", self.manifest.display())))?;
        let path = self.base.join(&e.path);
        if !path.is_file() {
            return Err(Error::MissingFeatureFile(path));
        }
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let want = e.frames * self.feat_dim * 4;
        if bytes.len() != want {
            return Err(Error::ManifestMismatch {
                id: e.id,
                detail: format!(
                    "manifest says {} frames ({want} bytes at feat_dim {}), file has {} bytes",
                    e.frames,
                    self.feat_dim,
                    bytes.len()
                ),
            });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Utterance {
            id: e.id,
            features: Tensor::new(vec![e.frames, self.feat_dim], data),
            tokens: e.tokens,
        })
    }
}

impl Iterator for ManifestReader {
    type Item = Result<Utterance>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.manifest, e))),
            };
            if !line.trim().is_empty() {
                return Some(self.read_entry(&line));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_and_grammar() {
        let cfg = CorpusConfig::default();
        assert_eq!(cfg.pairs(), vec![(1, 2), (9, 10), (3, 4), (11, 12)]);
        let emb = cfg.embeddings();
        assert_eq!(emb.row(1), emb.row(2));
        assert_ne!(emb.row(1), emb.row(3));
        let utts = generate_utterances(&cfg, 300).unwrap();
        for u in &utts {
            assert!((4..=12).contains(&u.tokens.len()));
            assert!(!cfg.is_ambiguous(*u.tokens.last().unwrap()));
            for w in u.tokens.windows(2) {
                assert_ne!(w[0], w[1]);
                match cfg.pair_role(w[0]) {
                    Some((_, true)) => assert!(w[1] <= 8),
                    Some((_, false)) => assert!(w[1] > 8),
                    None => {}
                }
            }
        }
    }

    #[test]
    fn clean_frames_equal_embeddings() {
        let cfg = CorpusConfig {
            gamma: 0.0,
            sigma: 0.0,
            ambiguous_pairs: 0,
            ..CorpusConfig::default()
        };
        let emb = cfg.embeddings();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (u, durs) = generate_utterance(&mut rng, &cfg, &emb, "x".into());
        let mut t = 0;
        for (&tok, &d) in u.tokens.iter().zip(&durs) {
            for _ in 0..d {
                let want: Vec<f32> = emb.row(tok).iter().map(|&v| v as f32).collect();
                assert_eq!(u.features.row(t), &want[..]);
                t += 1;
            }
        }
        assert_eq!(t, u.features.rows());
    }

    #[test]
    fn seeds_are_deterministic_and_disjoint() {
        let a = CorpusConfig::default();
        assert_eq!(generate_utterances(&a, 5).unwrap(), generate_utterances(&a, 5).unwrap());
        let b = CorpusConfig { seed: 1, ..a.clone() };
        let (ua, ub) = (generate_utterances(&a, 5).unwrap(), generate_utterances(&b, 5).unwrap());
        for (x, y) in ua.iter().zip(&ub) {
            assert_ne!(x.id, y.id);
            assert_ne!(x.features, y.features);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            CorpusConfig { gamma: 1.0, ..Default::default() },
            CorpusConfig { min_duration: 0, ..Default::default() },
            CorpusConfig { ambiguous_pairs: 9, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
