//! Image quality and edit-direction metrics over pluggable embedders.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::editor::portable_uniform;
use crate::editor::remote::{encode_png, RemoteClient};
use crate::error::{Error, Result};
use crate::image::Image;

pub const EMBEDDING_DIM: usize = 512;
pub const PSNR_CAP_DB: f64 = 120.0;
const DEGENERATE_NORM: f64 = 1e-8;

/// `10 log10(1 / mse)` for images in `[0, 1]`, capped for identical inputs.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse < 1e-12 {
        Ok(PSNR_CAP_DB)
    } else {
        Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
    }
}

/// A unit-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalizes `values`; a zero vector is rejected.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        let n = norm(&values);
        if n < DEGENERATE_NORM {
            return Err(Error::DegenerateDirection(n));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / n).collect(),
        })
    }

    /// Accepts an already normalized vector, checking the norm to 1e-5.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding"));
        }
        let n = norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > 1e-5 {
            return Err(Error::ShapeMismatch(format!(
                "embedding norm {n}, expected 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn diff(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu < DEGENERATE_NORM || nv < DEGENERATE_NORM {
        return Err(Error::DegenerateDirection(nu.min(nv)));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine between the image edit direction and the text edit direction.
pub fn directional_similarity(
    o_img: &EmbeddingVector,
    e_img: &EmbeddingVector,
    o_txt: &EmbeddingVector,
    e_txt: &EmbeddingVector,
) -> Result<f64> {
    cosine(&diff(e_img, o_img)?, &diff(e_txt, o_txt)?)
}

/// Per adjacent-pair consistency values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionConsistency {
    /// `(e_i - o_i) . (e_{i+1} - e_i)`.
    pub raw_dot: Vec<f64>,
    /// `cos(e_i - o_i, e_{i+1} - o_{i+1})`.
    pub cosine: Vec<f64>,
}

/// Consistency of edit directions between adjacent frames. `frames` holds
/// `(original, edited)` embeddings in path order.
pub fn direction_consistency(
    frames: &[(EmbeddingVector, EmbeddingVector)],
) -> Result<DirectionConsistency> {
    Ok(DirectionConsistency {
        raw_dot: consistency_raw_dot(frames)?,
        cosine: consistency_cosine(frames)?,
    })
}

/// `(e_i - o_i) . (e_{i+1} - e_i)` for each adjacent pair.
pub fn consistency_raw_dot(frames: &[(EmbeddingVector, EmbeddingVector)]) -> Result<Vec<f64>> {
    check_frames(frames)?;
    frames
        .windows(2)
        .map(|w| {
            let ((o0, e0), (_, e1)) = (&w[0], &w[1]);
            Ok(dot(&diff(e0, o0)?, &diff(e1, e0)?))
        })
        .collect()
}

/// `cos(e_i - o_i, e_{i+1} - o_{i+1})` for each adjacent pair.
pub fn consistency_cosine(frames: &[(EmbeddingVector, EmbeddingVector)]) -> Result<Vec<f64>> {
    check_frames(frames)?;
    frames
        .windows(2)
        .map(|w| {
            let ((o0, e0), (o1, e1)) = (&w[0], &w[1]);
            cosine(&diff(e0, o0)?, &diff(e1, o1)?)
        })
        .collect()
}

fn check_frames(frames: &[(EmbeddingVector, EmbeddingVector)]) -> Result<()> {
    if frames.len() < 2 {
        return Err(Error::EmptyInput(
            "direction consistency needs at least two frames",
        ));
    }
    Ok(())
}

pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn describe(&self) -> String;
}

/// Deterministic stand-in embedder.
///
/// Images are resized bilinearly to 16x16, flattened row-major as
/// `(y, x, channel)` after subtracting 0.5, and multiplied by a 512x768
/// matrix whose row-major entries are `2u - 1` from SplitMix64 seeded with
/// `seed` (see [`portable_uniform`]). Text is lowercased and split on
/// non-alphanumeric characters; each token adds one to feature
/// `fnv1a64(token) % 768` before the same projection. Results are
/// normalized; an all-zero projection maps to the first basis vector.
#[derive(Clone, Debug)]
pub struct MockEmbedder {
    seed: u64,
    projection: Vec<f64>,
}

const MOCK_SIDE: u32 = 16;
const MOCK_FEATURES: usize = (MOCK_SIDE * MOCK_SIDE * 3) as usize;

impl Default for MockEmbedder {
    fn default() -> Self {
        Self::new(0)
    }
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let projection = (0..EMBEDDING_DIM * MOCK_FEATURES)
            .map(|_| 2.0 * portable_uniform(&mut rng) - 1.0)
            .collect();
        Self { seed, projection }
    }

    fn project(&self, features: &[f64]) -> EmbeddingVector {
        let out: Vec<f64> = self
            .projection
            .chunks_exact(MOCK_FEATURES)
            .map(|row| dot(row, features))
            .collect();
        EmbeddingVector::normalized(out).unwrap_or_else(|_| {
            let mut e = vec![0.0; EMBEDDING_DIM];
            e[0] = 1.0;
            EmbeddingVector { values: e }
        })
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Embedder for MockEmbedder {
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        if image.is_empty() {
            return Err(Error::EmptyInput("image"));
        }
        let small = image.resize_bilinear(MOCK_SIDE, MOCK_SIDE);
        let features: Vec<f64> = small
            .pixels()
            .iter()
            .flat_map(|p| p.map(|v| v - 0.5))
            .collect();
        Ok(self.project(&features))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let lower = text.to_lowercase();
        let mut features = vec![0.0; MOCK_FEATURES];
        let mut tokens = 0;
        for tok in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            features[(fnv1a64(tok.as_bytes()) % MOCK_FEATURES as u64) as usize] += 1.0;
            tokens += 1;
        }
        if tokens == 0 {
            return Err(Error::EmptyInput("text"));
        }
        Ok(self.project(&features))
    }

    fn describe(&self) -> String {
        format!("mock(seed={})", self.seed)
    }
}

/// Embedder backed by the diffusion service's embedding endpoints.
#[derive(Clone, Debug)]
pub struct RemoteEmbedder {
    client: RemoteClient,
}

#[derive(Serialize)]
struct ImageBody {
    png: String,
}

#[derive(Serialize)]
struct TextBody<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct VectorResponse {
    vector: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str) -> Self {
        Self {
            client: RemoteClient::new(base_url, Duration::from_secs(120)),
        }
    }

    fn check(v: VectorResponse) -> Result<EmbeddingVector> {
        if v.vector.len() != EMBEDDING_DIM {
            return Err(Error::RemoteProtocolError(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                v.vector.len()
            )));
        }
        EmbeddingVector::normalized(v.vector).map_err(|e| Error::RemoteProtocolError(e.to_string()))
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_image(&self, image: &Image) -> Result<EmbeddingVector> {
        let v: VectorResponse = self.client.post(
            "/v1/embed_image",
            &ImageBody {
                png: encode_png(image)?,
            },
        )?;
        Self::check(v)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput("text"));
        }
        let v: VectorResponse = self.client.post("/v1/embed_text", &TextBody { text })?;
        Self::check(v)
    }

    fn describe(&self) -> String {
        format!("remote({})", self.client.base())
    }
}

/// Builds an embedder from `mock`, `mock:<seed>` or `remote:<url>`.
pub fn parse_embedder(selection: &str) -> Result<Box<dyn Embedder>> {
    let bad = || Error::InvalidSelection(selection.to_string());
    match selection.split_once(':') {
        None if selection == "mock" => Ok(Box::new(MockEmbedder::default())),
        Some(("mock", seed)) => Ok(Box::new(MockEmbedder::new(
            seed.parse().map_err(|_| bad())?,
        ))),
        Some(("remote", url)) if !url.is_empty() => Ok(Box::new(RemoteEmbedder::new(url))),
        _ => Err(bad()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over frames; absent without source and target captions.
    pub directional_similarity: Option<f64>,
    pub consistency_cosine: f64,
    pub consistency_raw_dot: f64,
    /// Mean PSNR of edited frames against references, when given.
    pub psnr: Option<f64>,
    pub frame_count: usize,
}

/// Per adjacent-pair row of the CSV output.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub index: usize,
    pub raw_dot: f64,
    pub cosine: f64,
}

/// Captions describing the scene before and after the edit.
#[derive(Clone, Copy, Debug)]
pub struct Captions<'a> {
    pub source: &'a str,
    pub target: &'a str,
}

/// Evaluates an edited frame sequence against its originals.
pub fn evaluate_sequence(
    embedder: &dyn Embedder,
    originals: &[Image],
    edited: &[Image],
    captions: Option<Captions<'_>>,
    references: Option<&[Image]>,
) -> Result<(MetricsReport, Vec<PairRecord>)> {
    if originals.len() != edited.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} originals, {} edited frames",
            originals.len(),
            edited.len()
        )));
    }
    let frames = originals
        .iter()
        .zip(edited)
        .map(|(o, e)| Ok((embedder.embed_image(o)?, embedder.embed_image(e)?)))
        .collect::<Result<Vec<_>>>()?;
    let dc = direction_consistency(&frames)?;
    let directional_similarity = match captions {
        Some(c) => {
            let (ot, et) = (
                embedder.embed_text(c.source)?,
                embedder.embed_text(c.target)?,
            );
            let sims = frames
                .iter()
                .map(|(o, e)| directional_similarity(o, e, &ot, &et))
                .collect::<Result<Vec<_>>>()?;
            Some(mean(&sims))
        }
        None => None,
    };
    let psnr = match references {
        Some(refs) => {
            if refs.len() != edited.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} references, {} edited frames",
                    refs.len(),
                    edited.len()
                )));
            }
            let v = refs
                .iter()
                .zip(edited)
                .map(|(r, e)| psnr(e, r))
                .collect::<Result<Vec<_>>>()?;
            Some(mean(&v))
        }
        None => None,
    };
    let pairs = dc
        .raw_dot
        .iter()
        .zip(&dc.cosine)
        .enumerate()
        .map(|(index, (&raw_dot, &cosine))| PairRecord {
            index,
            raw_dot,
            cosine,
        })
        .collect();
    Ok((
        MetricsReport {
            directional_similarity,
            consistency_cosine: mean(&dc.cosine),
            consistency_raw_dot: mean(&dc.raw_dot),
            psnr,
            frame_count: frames.len(),
        },
        pairs,
    ))
}

/// Mean cosine consistency of edit directions for frames in order.
pub fn sequence_consistency(
    embedder: &dyn Embedder,
    originals: &[Image],
    edited: &[Image],
) -> Result<f64> {
    Ok(evaluate_sequence(embedder, originals, edited, None, None)?
        .0
        .consistency_cosine)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Writes `metrics.json` and `pairs.csv` into `dir`.
pub fn write_metrics(dir: &Path, report: &MetricsReport, pairs: &[PairRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let mut csv = std::fs::File::create(dir.join("pairs.csv"))?;
    writeln!(csv, "pair,raw_dot,cosine")?;
    for p in pairs {
        writeln!(csv, "{},{:.17e},{:.17e}", p.index, p.raw_dot, p.cosine)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.3; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 120.0);
        let zero = Image::filled(4, 4, [0.0; 3]);
        let one = Image::filled(4, 4, [1.0; 3]);
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
        // A uniform offset of 0.1 gives MSE 0.01.
        let b = Image::filled(4, 4, [0.4; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let small = Image::filled(2, 4, [0.3; 3]);
        assert!(matches!(
            psnr(&a, &small),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn directional_similarity_examples() {
        let o = unit(&[1.0, 0.0]);
        let e = unit(&[0.0, 1.0]);
        // Parallel directions.
        assert!((directional_similarity(&o, &e, &o, &e).unwrap() - 1.0).abs() < 1e-12);
        // Image direction (-1, 1)/..., text direction (1, 1)/...: orthogonal.
        let ot = unit(&[-1.0, 0.0]);
        let et = unit(&[0.0, 1.0]);
        assert!(directional_similarity(&o, &e, &ot, &et).unwrap().abs() < 1e-12);
        assert!(matches!(
            directional_similarity(&o, &o, &ot, &et),
            Err(Error::DegenerateDirection(_))
        ));
    }

    #[test]
    fn zero_edit_gives_zero_raw_dot_values() {
        let frames: Vec<_> = [[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]
            .iter()
            .map(|v| (unit(v), unit(v)))
            .collect();
        assert_eq!(consistency_raw_dot(&frames).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            consistency_cosine(&frames),
            Err(Error::DegenerateDirection(_))
        ));
        assert!(consistency_raw_dot(&frames[..1]).is_err());
    }

    #[test]
    fn hand_computed_three_frame_example() {
        // o0 = (1,0), e0 = (0.6,0.8); o1 = (0.8,0.6), e1 = (0,1);
        // o2 = (0.6,0.8), e2 = (-0.6,0.8).
        let f = |a: [f64; 2], b: [f64; 2]| (unit(&a), unit(&b));
        let frames = vec![
            f([1.0, 0.0], [0.6, 0.8]),
            f([0.8, 0.6], [0.0, 1.0]),
            f([0.6, 0.8], [-0.6, 0.8]),
        ];
        let dc = direction_consistency(&frames).unwrap();
        // d0 = (-0.4, 0.8), e1 - e0 = (-0.6, 0.2): 0.24 + 0.16.
        assert!((dc.raw_dot[0] - 0.40).abs() < 1e-9);
        // d1 = (-0.8, 0.4), e2 - e1 = (-0.6, -0.2): 0.48 - 0.08.
        assert!((dc.raw_dot[1] - 0.40).abs() < 1e-9);
        // cos(d0, d1) = (0.32 + 0.32) / (sqrt(0.8) * sqrt(0.8)) = 0.8.
        assert!((dc.cosine[0] - 0.8).abs() < 1e-9);
        // d2 = (-1.2, 0): cos(d1, d2) = 0.96 / (sqrt(0.8) * 1.2).
        assert!((dc.cosine[1] - 0.96 / (0.8f64.sqrt() * 1.2)).abs() < 1e-9);
    }

    #[test]
    fn constant_small_offset_is_consistent() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let mut delta = vec![0.0; 64];
        delta[63] = 1e-3;
        let frames: Vec<_> = (0..8)
            .map(|_| {
                let mut o: Vec<f64> = (0..64)
                    .map(|_| 2.0 * portable_uniform(&mut rng) - 1.0)
                    .collect();
                o[63] = 0.0;
                let o = unit(&o);
                let e: Vec<f64> = o.values().iter().zip(&delta).map(|(a, b)| a + b).collect();
                (o, unit(&e))
            })
            .collect();
        let dc = direction_consistency(&frames).unwrap();
        for c in dc.cosine {
            assert!((c - 1.0).abs() < 1e-3, "{c}");
        }
    }

    #[test]
    fn mock_embedder_contract() {
        let m = MockEmbedder::default();
        let img = Image::from_fn(20, 12, |x, y| [x as f64 / 20.0, y as f64 / 12.0, 0.7]);
        let a = m.embed_image(&img).unwrap();
        assert_eq!(a, m.embed_image(&img).unwrap());
        assert_eq!(a.dim(), EMBEDDING_DIM);
        let dim = m.embed_image(&img.map(|p| p.map(|v| 0.5 * v))).unwrap();
        assert!(a.dot(&dim) < 1.0 - 1e-4);
        assert!(matches!(m.embed_text("  ,, "), Err(Error::EmptyInput(_))));
        let t = m.embed_text("Turn it RED").unwrap();
        assert_eq!(t, m.embed_text("turn it red").unwrap());
        assert_ne!(t, m.embed_text("turn it blue").unwrap());
        // Gray 0.5 centers to zero and falls back to the first basis vector.
        let gray = m.embed_image(&Image::filled(4, 4, [0.5; 3])).unwrap();
        assert_eq!(gray.values()[0], 1.0);
    }

    #[test]
    fn mock_embeddings_are_unit_norm() {
        let m = MockEmbedder::new(3);
        let mut rng = SplitMix64::seed_from_u64(9);
        for i in 0..100 {
            let img = Image::from_fn(8 + i % 5, 6 + i % 3, |_, _| {
                std::array::from_fn(|_| portable_uniform(&mut rng))
            });
            let v = m.embed_image(&img).unwrap();
            assert!((norm(v.values()) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn embedder_selection() {
        assert!(parse_embedder("mock")
            .unwrap()
            .describe()
            .starts_with("mock"));
        assert_eq!(parse_embedder("mock:7").unwrap().describe(), "mock(seed=7)");
        assert!(parse_embedder("remote:http://localhost:1").is_ok());
        assert!(parse_embedder("clip").is_err());
        assert!(parse_embedder("mock:x").is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricsReport {
            directional_similarity: Some(0.5),
            consistency_cosine: 0.9,
            consistency_raw_dot: 0.1,
            psnr: None,
            frame_count: 3,
        };
        let pairs = vec![PairRecord {
            index: 0,
            raw_dot: 0.1,
            cosine: 0.9,
        }];
        write_metrics(dir.path(), &report, &pairs).unwrap();
        let back: MetricsReport = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("metrics.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(back, report);
        let csv = std::fs::read_to_string(dir.path().join("pairs.csv")).unwrap();
        assert!(csv.starts_with("pair,raw_dot,cosine\n0,"));
    }

    proptest! {
        #[test]
        fn cosine_consistency_is_rotation_invariant(seed in 0u64..500, angle in 0.0f64..std::f64::consts::TAU, plane in 0usize..7) {
            let mut rng = SplitMix64::seed_from_u64(seed);
            let frames: Vec<_> = (0..4)
                .map(|_| {
                    let mut draw = || unit(&(0..8).map(|_| 2.0 * portable_uniform(&mut rng) - 1.0).collect::<Vec<_>>());
                    (draw(), draw())
                })
                .collect();
            let rotate = |v: &EmbeddingVector| {
                let mut x = v.values().to_vec();
                let (i, j) = (plane, plane + 1);
                let (c, s) = (angle.cos(), angle.sin());
                let (a, b) = (x[i], x[j]);
                x[i] = c * a - s * b;
                x[j] = s * a + c * b;
                // A second rotation in a disjoint plane makes the map less trivial.
                let (k, l) = ((plane + 3) % 8, (plane + 5) % 8);
                if k != i && k != j && l != i && l != j {
                    let (a, b) = (x[k], x[l]);
                    x[k] = c * a + s * b;
                    x[l] = -s * a + c * b;
                }
                unit(&x)
            };
            let rotated: Vec<_> = frames.iter().map(|(o, e)| (rotate(o), rotate(e))).collect();
            let a = direction_consistency(&frames).unwrap();
            let b = direction_consistency(&rotated).unwrap();
            for (x, y) in a.cosine.iter().zip(&b.cosine) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
