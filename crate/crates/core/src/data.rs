//! Utterance manifests, pseudo-speech feature synthesis and augmentation.
//!
//! Real audio is replaced by deterministic "pseudo-mel" matrices: every
//! character owns a fixed random vector (drawn from the alphabet seed), which
//! is repeated `upsample` frames and perturbed by per-utterance jitter.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_tagged, encode_tagged, DecodeMode, TaggedTranscript};
use crate::error::{Error, Result};
use crate::metrics::Sentiment;

/// A `T x F` feature matrix (time by mel band).
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeature {
    pub frames: Array2<f64>,
}

impl MelFeature {
    pub fn new(frames: Array2<f64>) -> Self {
        MelFeature { frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bands(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().all(|v| v.is_finite())
    }

    /// Zero-pads (silence) or trims along time to exactly `max_frames`.
    pub fn pad_or_trim(&self, max_frames: usize) -> MelFeature {
        let t = self.num_frames().min(max_frames);
        let mut out = Array2::zeros((max_frames, self.num_bands()));
        out.slice_mut(s![..t, ..])
            .assign(&self.frames.slice(s![..t, ..]));
        MelFeature { frames: out }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub max_frames: usize,
    pub upsample: usize,
    /// Standard deviation of the per-frame jitter.
    pub jitter: f64,
    /// Seed of the character-to-vector table, shared by every utterance.
    pub alphabet_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 40,
            max_frames: 128,
            upsample: 4,
            jitter: 0.1,
            alphabet_seed: 17,
        }
    }
}

/// The fixed base vector of one character.
pub fn char_vector(c: char, cfg: &FeatureConfig) -> Vec<f64> {
    let seed = cfg
        .alphabet_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(c as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.n_mels)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Deterministic pseudo-mel for a transcript: `len(chars) * upsample` frames.
pub fn text_to_pseudo_mel(transcript: &str, seed: u64, cfg: &FeatureConfig) -> MelFeature {
    let chars: Vec<char> = transcript.chars().collect();
    let t = (chars.len() * cfg.upsample).max(1);
    let mut frames = Array2::zeros((t, cfg.n_mels));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table: std::collections::HashMap<char, Vec<f64>> = Default::default();
    for (i, c) in chars.iter().enumerate() {
        let base = table.entry(*c).or_insert_with(|| char_vector(*c, cfg));
        for r in 0..cfg.upsample {
            let mut row = frames.row_mut(i * cfg.upsample + r);
            for (f, b) in base.iter().enumerate() {
                row[f] = b + cfg.jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    MelFeature { frames }
}

/// Time-stretches by linear interpolation to `round(T / factor)` frames.
pub fn speed_perturb(x: &MelFeature, factor: f64) -> Result<MelFeature> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Config(format!(
            "speed factor must be positive, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let t = x.num_frames();
    let t_out = ((t as f64 / factor).round() as usize).max(1);
    let mut out = Array2::zeros((t_out, x.num_bands()));
    for j in 0..t_out {
        let src = if t_out == 1 {
            0.0
        } else {
            j as f64 * (t - 1) as f64 / (t_out - 1) as f64
        };
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let w = src - lo as f64;
        let row = &x.frames.row(lo) * (1.0 - w) + &x.frames.row(hi) * w;
        out.row_mut(j).assign(&row);
    }
    Ok(MelFeature { frames: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentConfig {
    pub num_freq_masks: usize,
    pub min_freq_width: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub min_time_width: usize,
    pub max_time_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig {
            num_freq_masks: 1,
            min_freq_width: 0,
            max_freq_width: 4,
            num_time_masks: 1,
            min_time_width: 0,
            max_time_width: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Bands `[start, start+width)` over all frames.
    Freq { start: usize, width: usize },
    /// Frames `[start, start+width)` over all bands.
    Time { start: usize, width: usize },
}

/// SpecAugment with masks filled by the feature mean. Also returns the masks.
pub fn spec_augment_with_masks<R: Rng + ?Sized>(
    x: &MelFeature,
    rng: &mut R,
    cfg: &SpecAugmentConfig,
) -> (MelFeature, Vec<Mask>) {
    let (t, f) = x.frames.dim();
    let mean = x.frames.mean().unwrap_or(0.0);
    let mut out = x.frames.clone();
    let mut masks = Vec::new();
    let draw = |rng: &mut R, lo: usize, hi: usize, dim: usize| {
        let hi = hi.min(dim);
        let lo = lo.min(hi);
        let width = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=dim - width);
        (start, width)
    };
    for _ in 0..cfg.num_freq_masks {
        let (start, width) = draw(rng, cfg.min_freq_width, cfg.max_freq_width, f);
        out.slice_mut(s![.., start..start + width]).fill(mean);
        masks.push(Mask::Freq { start, width });
    }
    for _ in 0..cfg.num_time_masks {
        let (start, width) = draw(rng, cfg.min_time_width, cfg.max_time_width, t);
        out.slice_mut(s![start..start + width, ..]).fill(mean);
        masks.push(Mask::Time { start, width });
    }
    (MelFeature { frames: out }, masks)
}

pub fn spec_augment<R: Rng + ?Sized>(
    x: &MelFeature,
    rng: &mut R,
    cfg: &SpecAugmentConfig,
) -> MelFeature {
    spec_augment_with_masks(x, rng, cfg).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub speed_factors: Vec<f64>,
    pub spec_augment: SpecAugmentConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            speed_factors: vec![0.9, 1.0, 1.1],
            spec_augment: SpecAugmentConfig::default(),
        }
    }
}

/// Random speed factor from the configured set, then SpecAugment.
pub fn augment<R: Rng + ?Sized>(
    x: &MelFeature,
    rng: &mut R,
    cfg: &AugmentConfig,
) -> Result<MelFeature> {
    let x = if cfg.speed_factors.is_empty() {
        x.clone()
    } else {
        let f = cfg.speed_factors[rng.random_range(0..cfg.speed_factors.len())];
        speed_perturb(x, f)?
    };
    Ok(spec_augment(&x, rng, &cfg.spec_augment))
}

/// Writes a feature file: `{T: u32, F: u32}` little-endian header followed by
/// row-major little-endian `f32` values.
pub fn write_feature_file(path: &Path, x: &MelFeature) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (t, f) = x.frames.dim();
    let mut buf = Vec::with_capacity(8 + 4 * t * f);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    for v in x.frames.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<MelFeature> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("feature file shorter than its header"));
    }
    let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if t == 0 || f == 0 || bytes.len() != 8 + 4 * t * f {
        return Err(bad("feature payload does not match header {T, F}"));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let frames = Array2::from_shape_vec((t, f), values).map_err(|e| bad(&e.to_string()))?;
    let x = MelFeature { frames };
    if !x.is_finite() {
        return Err(bad("non-finite feature values"));
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    pub tagged: Option<TaggedTranscript>,
    pub sentiment: Option<Sentiment>,
    pub feature_seed: Option<u64>,
    pub feature_path: Option<PathBuf>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, transcript: impl Into<String>) -> Self {
        Utterance {
            id: id.into(),
            transcript: transcript.into(),
            tagged: None,
            sentiment: None,
            feature_seed: None,
            feature_path: None,
        }
    }

    /// Loads the feature file if one is referenced, otherwise synthesises a
    /// pseudo-mel from the transcript.
    pub fn feature(&self, cfg: &FeatureConfig) -> Result<MelFeature> {
        match &self.feature_path {
            Some(p) => read_feature_file(p),
            None => Ok(text_to_pseudo_mel(
                &self.transcript,
                self.feature_seed.unwrap_or(0),
                cfg,
            )),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tagged: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_path: Option<PathBuf>,
}

pub fn parse_manifest_line(line: &str) -> std::result::Result<Utterance, String> {
    let raw: ManifestLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.transcript.trim().is_empty() {
        return Err("empty transcript".into());
    }
    let tagged = raw
        .tagged
        .as_deref()
        .map(|t| decode_tagged(t, DecodeMode::Strict))
        .transpose()
        .map_err(|e| format!("tagged: {e}"))?;
    let sentiment = raw
        .sentiment
        .as_deref()
        .map(str::parse::<Sentiment>)
        .transpose()
        .map_err(|e| e.to_string())?;
    Ok(Utterance {
        id: raw.id,
        transcript: raw.transcript,
        tagged,
        sentiment,
        feature_seed: raw.feature_seed,
        feature_path: raw.feature_path,
    })
}

/// Reads a JSONL manifest. Relative `feature_path`s resolve against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut utt = parse_manifest_line(&line).map_err(|msg| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        if let Some(p) = &utt.feature_path {
            if p.is_relative() {
                utt.feature_path = Some(base.join(p));
            }
        }
        out.push(utt);
    }
    Ok(out)
}

pub fn manifest_line(u: &Utterance) -> Result<String> {
    let raw = ManifestLine {
        id: u.id.clone(),
        transcript: u.transcript.clone(),
        tagged: u.tagged.as_ref().map(encode_tagged).transpose()?,
        sentiment: u.sentiment.map(|s| s.as_str().to_string()),
        feature_seed: u.feature_seed,
        feature_path: u.feature_path.clone(),
    };
    Ok(serde_json::to_string(&raw)?)
}

pub fn write_manifest(utts: &[Utterance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in utts {
        writeln!(w, "{}", manifest_line(u)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::EntityTag;
    use proptest::prelude::*;

    fn cfg() -> FeatureConfig {
        FeatureConfig::default()
    }

    #[test]
    fn pseudo_mel_is_deterministic() {
        let a = text_to_pseudo_mel("hello there", 5, &cfg());
        let b = text_to_pseudo_mel("hello there", 5, &cfg());
        assert_eq!(a, b);
        let c = text_to_pseudo_mel("hello there", 6, &cfg());
        assert_ne!(a, c);
    }

    #[test]
    fn pseudo_mel_length() {
        let x = text_to_pseudo_mel("ab", 0, &cfg());
        assert_eq!(x.frames.dim(), (8, 40));
    }

    #[test]
    fn letters_are_well_separated() {
        let vs: Vec<Vec<f64>> = ('a'..='z').map(|c| char_vector(c, &cfg())).collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                worst = worst.max(dot / (norm(&vs[i]) * norm(&vs[j])));
            }
        }
        assert!(worst < 0.9, "max pairwise cosine {worst}");
    }

    #[test]
    fn pad_and_trim() {
        let x = text_to_pseudo_mel("abc", 1, &cfg());
        let p = x.pad_or_trim(20);
        assert_eq!(p.num_frames(), 20);
        assert_eq!(p.frames.row(11), x.frames.row(11));
        assert!(p.frames.row(12).iter().all(|v| *v == 0.0));
        assert_eq!(x.pad_or_trim(5).num_frames(), 5);
    }

    #[test]
    fn speed_perturb_examples() {
        let x = text_to_pseudo_mel("abcdefghijklmnopqrstuvwxy", 2, &cfg());
        assert_eq!(x.num_frames(), 100);
        assert_eq!(speed_perturb(&x, 1.0).unwrap(), x);
        assert_eq!(speed_perturb(&x, 0.9).unwrap().num_frames(), 111);
        assert_eq!(speed_perturb(&x, 1.1).unwrap().num_frames(), 91);
        assert!(speed_perturb(&x, 0.0).is_err());
        assert!(speed_perturb(&x, -1.0).is_err());

        let constant = MelFeature::new(Array2::from_elem((50, 3), 2.5));
        let y = speed_perturb(&constant, 0.9).unwrap();
        assert!(y.frames.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn spec_augment_examples() {
        let x = text_to_pseudo_mel("masking", 3, &cfg());
        let none = SpecAugmentConfig {
            num_freq_masks: 0,
            num_time_masks: 0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spec_augment(&x, &mut rng, &none), x);

        let t = x.num_frames();
        let full = SpecAugmentConfig {
            num_freq_masks: 0,
            num_time_masks: 1,
            min_time_width: t,
            max_time_width: t,
            ..Default::default()
        };
        let mean = x.frames.mean().unwrap();
        let y = spec_augment(&x, &mut rng, &full);
        assert!(y.frames.iter().all(|v| *v == mean));
    }

    #[test]
    fn masked_cells_match_mask_union() {
        let x = text_to_pseudo_mel("count the masked cells", 4, &cfg());
        let (t, f) = x.frames.dim();
        let aug = SpecAugmentConfig {
            num_freq_masks: 2,
            min_freq_width: 1,
            max_freq_width: 6,
            num_time_masks: 3,
            min_time_width: 1,
            max_time_width: 10,
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (y, masks) = spec_augment_with_masks(&x, &mut rng, &aug);
            let mut covered = Array2::from_elem((t, f), false);
            for m in &masks {
                match *m {
                    Mask::Freq { start, width } => {
                        covered.slice_mut(s![.., start..start + width]).fill(true)
                    }
                    Mask::Time { start, width } => {
                        covered.slice_mut(s![start..start + width, ..]).fill(true)
                    }
                }
            }
            let expected = covered.iter().filter(|c| **c).count();
            let changed = x
                .frames
                .iter()
                .zip(y.frames.iter())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(changed, expected);
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.bin");
        let x = text_to_pseudo_mel("xyz", 0, &cfg());
        write_feature_file(&p, &x).unwrap();
        let y = read_feature_file(&p).unwrap();
        assert_eq!(y.frames.dim(), x.frames.dim());
        for (a, b) in x.frames.iter().zip(y.frames.iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
        std::fs::write(&p, [1u8, 0, 0, 0, 2, 0, 0, 0, 0]).unwrap();
        assert!(read_feature_file(&p).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut a = Utterance::new("a", "i saw john");
        a.tagged = Some(TaggedTranscript::new(
            "i saw john",
            vec![(EntityTag::Person, "john")],
        ));
        a.feature_seed = Some(3);
        let mut b = Utterance::new("b", "what a day");
        b.sentiment = Some(Sentiment::Positive);
        let mut c = Utterance::new("c", "fifa met in paris");
        c.tagged = Some(TaggedTranscript::new(
            "fifa met in paris",
            vec![(EntityTag::Org, "fifa"), (EntityTag::Place, "paris")],
        ));
        let utts = vec![a, b, c];
        write_manifest(&utts, &p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), utts);

        std::fs::write(&p, "{\"id\":\"a\",\"transcript\":\"ok\"}\n{\"id\":\"b\"}\n").unwrap();
        match load_manifest(&p) {
            Err(Error::Manifest { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("transcript"), "{msg}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"transcript\":\"ok\",\"sentiment\":\"mixed\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&p),
            Err(Error::Manifest { line: 1, .. })
        ));
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"transcript\":\"ok\",\"tagged\":\"§P ok\"}\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&p),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn relative_feature_paths_resolve_against_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let x = text_to_pseudo_mel("hi", 0, &cfg());
        write_feature_file(&dir.path().join("hi.bin"), &x).unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"transcript\":\"hi\",\"feature_path\":\"hi.bin\"}\n",
        )
        .unwrap();
        let u = &load_manifest(&p).unwrap()[0];
        assert_eq!(u.feature(&cfg()).unwrap().num_frames(), 8);
    }

    proptest! {
        #[test]
        fn augmentation_keeps_bands_and_finiteness(seed in 0u64..1000, text in "[a-z ]{1,20}") {
            let x = text_to_pseudo_mel(&text, seed, &cfg());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = augment(&x, &mut rng, &AugmentConfig::default()).unwrap();
            prop_assert_eq!(y.num_bands(), x.num_bands());
            prop_assert!(y.is_finite());
        }

        #[test]
        fn inverse_speed_restores_length(t in 2usize..300, k in 0usize..3) {
            let factor = [0.9, 1.0, 1.1][k];
            let x = MelFeature::new(Array2::zeros((t, 2)));
            let y = speed_perturb(&speed_perturb(&x, factor).unwrap(), 1.0 / factor).unwrap();
            prop_assert!((y.num_frames() as i64 - t as i64).abs() <= 1);
        }
    }
}
