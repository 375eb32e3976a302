//! Time-series and image augmentations, contrastive view pairs and offline
//! training-set expansion.
//!
//! Every function draws its randomness from the caller's generator, so the
//! output is a deterministic function of input, spec and generator state.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::PacketSeries;
use crate::flowpic::{FlowpicConfig, Image};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation parameters: {0}")]
    InvalidParams(String),
    #[error("{0} is not applicable here")]
    WrongDomain(&'static str),
}

fn default_alpha_lo() -> f64 {
    0.5
}
fn default_alpha_hi() -> f64 {
    1.5
}
fn default_b_lo() -> f64 {
    -1.0
}
fn default_b_hi() -> f64 {
    1.0
}
fn default_p() -> f64 {
    0.01
}
fn default_max_degrees() -> f64 {
    10.0
}
fn default_delta() -> f64 {
    0.5
}

/// An augmentation and its hyper-parameters.
///
/// Serialized as `{"kind": "change_rtt", "params": {"alpha_lo": 0.5, ...}}`.
/// On input `params` may be omitted and missing parameters take their
/// defaults; unknown kinds and parameter names are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", try_from = "RawSpec")]
pub enum AugmentationSpec {
    NoAug,
    #[serde(rename = "change_rtt")]
    ChangeRtt {
        alpha_lo: f64,
        alpha_hi: f64,
    },
    TimeShift {
        b_lo: f64,
        b_hi: f64,
    },
    PacketLoss {
        p: f64,
    },
    Rotate {
        max_degrees: f64,
    },
    HorizontalFlip,
    ColorJitter {
        brightness_delta: f64,
        contrast_delta: f64,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    kind: String,
    #[serde(default)]
    params: Option<serde_json::Map<String, serde_json::Value>>,
}

impl TryFrom<RawSpec> for AugmentationSpec {
    type Error = String;

    fn try_from(raw: RawSpec) -> Result<Self, String> {
        let params = raw.params.unwrap_or_default();
        let allowed: &[&str] = match raw.kind.as_str() {
            "no_aug" | "horizontal_flip" => &[],
            "change_rtt" => &["alpha_lo", "alpha_hi"],
            "time_shift" => &["b_lo", "b_hi"],
            "packet_loss" => &["p"],
            "rotate" => &["max_degrees"],
            "color_jitter" => &["brightness_delta", "contrast_delta"],
            other => return Err(format!("unknown augmentation kind {other:?}")),
        };
        if let Some(k) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(format!("{}: unknown parameter {k:?}", raw.kind));
        }
        let get = |name: &str, default: f64| match params.get(name) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| format!("{}: {name} must be a number", raw.kind)),
        };
        Ok(match raw.kind.as_str() {
            "no_aug" => Self::NoAug,
            "horizontal_flip" => Self::HorizontalFlip,
            "change_rtt" => Self::ChangeRtt {
                alpha_lo: get("alpha_lo", default_alpha_lo())?,
                alpha_hi: get("alpha_hi", default_alpha_hi())?,
            },
            "time_shift" => Self::TimeShift {
                b_lo: get("b_lo", default_b_lo())?,
                b_hi: get("b_hi", default_b_hi())?,
            },
            "packet_loss" => Self::PacketLoss {
                p: get("p", default_p())?,
            },
            "rotate" => Self::Rotate {
                max_degrees: get("max_degrees", default_max_degrees())?,
            },
            _ => Self::ColorJitter {
                brightness_delta: get("brightness_delta", default_delta())?,
                contrast_delta: get("contrast_delta", default_delta())?,
            },
        })
    }
}

impl AugmentationSpec {
    pub fn change_rtt() -> Self {
        Self::ChangeRtt {
            alpha_lo: default_alpha_lo(),
            alpha_hi: default_alpha_hi(),
        }
    }

    pub fn time_shift() -> Self {
        Self::TimeShift {
            b_lo: default_b_lo(),
            b_hi: default_b_hi(),
        }
    }

    pub fn packet_loss() -> Self {
        Self::PacketLoss { p: default_p() }
    }

    pub fn rotate() -> Self {
        Self::Rotate {
            max_degrees: default_max_degrees(),
        }
    }

    pub fn color_jitter() -> Self {
        Self::ColorJitter {
            brightness_delta: default_delta(),
            contrast_delta: default_delta(),
        }
    }

    /// The seven augmentations benchmarked in a supervised campaign, with
    /// default parameters.
    pub fn benchmark_set() -> Vec<Self> {
        vec![
            Self::NoAug,
            Self::rotate(),
            Self::HorizontalFlip,
            Self::color_jitter(),
            Self::packet_loss(),
            Self::time_shift(),
            Self::change_rtt(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::NoAug => "no_aug",
            Self::ChangeRtt { .. } => "change_rtt",
            Self::TimeShift { .. } => "time_shift",
            Self::PacketLoss { .. } => "packet_loss",
            Self::Rotate { .. } => "rotate",
            Self::HorizontalFlip => "horizontal_flip",
            Self::ColorJitter { .. } => "color_jitter",
        }
    }

    /// The augmentation called `name`, with default parameters.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "no_aug" => Self::NoAug,
            "change_rtt" => Self::change_rtt(),
            "time_shift" => Self::time_shift(),
            "packet_loss" => Self::packet_loss(),
            "rotate" => Self::rotate(),
            "horizontal_flip" => Self::HorizontalFlip,
            "color_jitter" => Self::color_jitter(),
            _ => return None,
        })
    }

    pub fn is_timeseries(&self) -> bool {
        matches!(
            self,
            Self::ChangeRtt { .. } | Self::TimeShift { .. } | Self::PacketLoss { .. }
        )
    }

    pub fn is_image(&self) -> bool {
        matches!(
            self,
            Self::Rotate { .. } | Self::HorizontalFlip | Self::ColorJitter { .. }
        )
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::InvalidParams(m));
        match *self {
            Self::ChangeRtt { alpha_lo, alpha_hi } => {
                if !(alpha_lo > 0.0 && alpha_lo <= alpha_hi && alpha_hi.is_finite()) {
                    return bad(format!("change_rtt interval [{alpha_lo}, {alpha_hi}]"));
                }
            }
            Self::TimeShift { b_lo, b_hi } => {
                if !(b_lo.is_finite() && b_hi.is_finite() && b_lo <= b_hi) {
                    return bad(format!("time_shift interval [{b_lo}, {b_hi}]"));
                }
            }
            Self::PacketLoss { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("packet_loss p={p}"));
                }
            }
            Self::Rotate { max_degrees } => {
                if !(max_degrees >= 0.0 && max_degrees.is_finite()) {
                    return bad(format!("rotate max_degrees={max_degrees}"));
                }
            }
            Self::ColorJitter {
                brightness_delta,
                contrast_delta,
            } => {
                if !(brightness_delta >= 0.0 && (0.0..=1.0).contains(&contrast_delta)) {
                    return bad(format!("color_jitter deltas ({brightness_delta}, {contrast_delta})"));
                }
            }
            Self::NoAug | Self::HorizontalFlip => {}
        }
        Ok(())
    }
}

/// `lo + (hi - lo) * u` with `u ~ U[0, 1)`; returns `lo` exactly when `lo == hi`.
/// Parses either a bare name (`rotate`) or the JSON form
/// (`{"kind": "rotate", "params": {"max_degrees": 5}}`).
impl std::str::FromStr for AugmentationSpec {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let spec = if s.starts_with('{') {
            serde_json::from_str(s).map_err(|e| AugmentError::InvalidParams(e.to_string()))?
        } else {
            Self::from_name(s).ok_or_else(|| AugmentError::InvalidParams(format!("unknown augmentation {s:?}")))?
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    lo + (hi - lo) * u
}

/// Applies a time-series augmentation. Image augmentations are rejected.
///
/// * Change RTT scales every timestamp by `alpha ~ U[alpha_lo, alpha_hi]`.
/// * Time Shift adds `b ~ U[b_lo, b_hi]`; packets moved before zero are dropped.
/// * Packet Loss drops each packet independently with probability `p`.
///
/// Packet sizes are never altered and the order is preserved.
pub fn apply_timeseries<R: Rng + ?Sized>(
    series: &PacketSeries,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<PacketSeries, AugmentError> {
    spec.validate()?;
    match *spec {
        AugmentationSpec::NoAug => Ok(series.clone()),
        AugmentationSpec::ChangeRtt { alpha_lo, alpha_hi } => {
            let alpha = uniform(rng, alpha_lo, alpha_hi);
            Ok(series.with_timestamps(series.timestamps().iter().map(|t| t * alpha).collect()))
        }
        AugmentationSpec::TimeShift { b_lo, b_hi } => {
            let b = uniform(rng, b_lo, b_hi);
            let shifted: Vec<f64> = series.timestamps().iter().map(|t| t + b).collect();
            let keep: Vec<bool> = shifted.iter().map(|&t| t >= 0.0).collect();
            let kept = series.with_timestamps(shifted).retain_indices(|i| keep[i]);
            Ok(kept)
        }
        AugmentationSpec::PacketLoss { p } => {
            let keep: Vec<bool> = (0..series.len()).map(|_| rng.gen::<f64>() >= p).collect();
            Ok(series.retain_indices(|i| keep[i]))
        }
        _ => Err(AugmentError::WrongDomain(spec.name())),
    }
}

/// Applies an image augmentation. Time-series augmentations are rejected.
///
/// * Horizontal flip mirrors columns (the time axis).
/// * Rotate turns the image by `theta ~ U[-max, max]` degrees around its
///   center with nearest-neighbour sampling; cells sampled from outside the
///   frame become zero.
/// * Color jitter maps `v -> max(0, c * v + b * vmax)` with
///   `c ~ U[1 - contrast_delta, 1 + contrast_delta]`,
///   `b ~ U[-brightness_delta, brightness_delta]` and `vmax` the image max.
pub fn apply_image<R: Rng + ?Sized>(img: &Image, spec: &AugmentationSpec, rng: &mut R) -> Result<Image, AugmentError> {
    spec.validate()?;
    match *spec {
        AugmentationSpec::NoAug => Ok(img.clone()),
        AugmentationSpec::HorizontalFlip => Ok(horizontal_flip(img)),
        AugmentationSpec::Rotate { max_degrees } => {
            let theta = uniform(rng, -max_degrees, max_degrees);
            Ok(rotate(img, theta))
        }
        AugmentationSpec::ColorJitter {
            brightness_delta,
            contrast_delta,
        } => {
            let contrast = uniform(rng, 1.0 - contrast_delta, 1.0 + contrast_delta);
            let brightness = uniform(rng, -brightness_delta, brightness_delta);
            Ok(color_jitter(img, contrast as f32, brightness as f32))
        }
        _ => Err(AugmentError::WrongDomain(spec.name())),
    }
}

pub fn horizontal_flip(img: &Image) -> Image {
    let n = img.size;
    let mut out = Image::zeros(n);
    for r in 0..n {
        for c in 0..n {
            out.set(r, n - 1 - c, img.get(r, c));
        }
    }
    out
}

/// Rotation by `degrees` around the image center (positive angles turn
/// clockwise on screen, with row 0 drawn at the top).
pub fn rotate(img: &Image, degrees: f64) -> Image {
    let n = img.size;
    let center = (n as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let mut out = Image::zeros(n);
    for r in 0..n {
        for c in 0..n {
            let y = r as f64 - center;
            let x = c as f64 - center;
            // Inverse map: source = R(-theta) * destination.
            let sx = cos * x + sin * y + center;
            let sy = -sin * x + cos * y + center;
            let (sr, sc) = (sy.round(), sx.round());
            if sr >= 0.0 && sc >= 0.0 && (sr as usize) < n && (sc as usize) < n {
                out.set(r, c, img.get(sr as usize, sc as usize));
            }
        }
    }
    out
}

pub fn color_jitter(img: &Image, contrast: f32, brightness: f32) -> Image {
    let offset = brightness * img.max();
    Image {
        size: img.size,
        data: img.data.iter().map(|&v| (contrast * v + offset).max(0.0)).collect(),
    }
}

/// One augmented view: time-series specs run before the flowpic is built,
/// image specs after, each group in the given order.
pub fn augmented_image<R: Rng + ?Sized>(
    series: &PacketSeries,
    specs: &[AugmentationSpec],
    flowpic: &FlowpicConfig,
    rng: &mut R,
) -> Result<Image, AugmentError> {
    let mut s = std::borrow::Cow::Borrowed(series);
    for spec in specs.iter().filter(|s| !s.is_image()) {
        s = std::borrow::Cow::Owned(apply_timeseries(&s, spec, rng)?);
    }
    let mut img = flowpic.image(&s);
    for spec in specs.iter().filter(|s| s.is_image()) {
        img = apply_image(&img, spec, rng)?;
    }
    Ok(img)
}

/// Two independently augmented views of one sample for contrastive training.
///
/// Each view draws its own random order of the two specs and applies both.
pub fn make_views<R: Rng + ?Sized>(
    sample: &PacketSeries,
    pair: (AugmentationSpec, AugmentationSpec),
    flowpic: &FlowpicConfig,
    rng: &mut R,
) -> Result<(Image, Image), AugmentError> {
    pair.0.validate()?;
    pair.1.validate()?;
    let view = |rng: &mut R| {
        let order = if rng.gen::<bool>() {
            [pair.0, pair.1]
        } else {
            [pair.1, pair.0]
        };
        augmented_image(sample, &order, flowpic, rng)
    };
    let a = view(rng)?;
    let b = view(rng)?;
    Ok((a, b))
}

/// Applies `spec` `times` times to each sample; copies of a sample are contiguous.
pub fn expand_training_set<R: Rng + ?Sized>(
    samples: &[PacketSeries],
    spec: &AugmentationSpec,
    times: usize,
    flowpic: &FlowpicConfig,
    rng: &mut R,
) -> Result<Vec<Image>, AugmentError> {
    if times == 0 {
        return Err(AugmentError::InvalidParams("times must be >= 1".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(samples.len() * times);
    for s in samples {
        for _ in 0..times {
            out.push(augmented_image(s, std::slice::from_ref(spec), flowpic, rng)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn series(ts: &[f64]) -> PacketSeries {
        let sizes = (0..ts.len()).map(|i| 100 + 10 * i as u32).collect();
        PacketSeries::from_parts(ts.to_vec(), sizes, None).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn change_rtt_scales() {
        let s = series(&[0.0, 10.0, 14.0]);
        let spec = AugmentationSpec::ChangeRtt {
            alpha_lo: 0.5,
            alpha_hi: 0.5,
        };
        let out = apply_timeseries(&s, &spec, &mut rng()).unwrap();
        assert_eq!(out.timestamps(), &[0.0, 5.0, 7.0]);
        assert_eq!(out.sizes(), s.sizes());

        let id = AugmentationSpec::ChangeRtt {
            alpha_lo: 1.0,
            alpha_hi: 1.0,
        };
        assert_eq!(apply_timeseries(&s, &id, &mut rng()).unwrap(), s);
    }

    #[test]
    fn time_shift_drops_negative_times() {
        let s = series(&[0.0, 0.5, 2.0]);
        let back = AugmentationSpec::TimeShift { b_lo: -1.0, b_hi: -1.0 };
        let out = apply_timeseries(&s, &back, &mut rng()).unwrap();
        assert_eq!(out.timestamps(), &[1.0]);
        assert_eq!(out.sizes(), &[120]);

        let zero = AugmentationSpec::TimeShift { b_lo: 0.0, b_hi: 0.0 };
        assert_eq!(apply_timeseries(&s, &zero, &mut rng()).unwrap(), s);
    }

    #[test]
    fn packet_loss_extremes() {
        let s = series(&[0.0, 1.0, 2.0]);
        let all = AugmentationSpec::PacketLoss { p: 1.0 };
        assert!(apply_timeseries(&s, &all, &mut rng()).unwrap().is_empty());
        let none = AugmentationSpec::PacketLoss { p: 0.0 };
        assert_eq!(apply_timeseries(&s, &none, &mut rng()).unwrap(), s);
    }

    #[test]
    fn wrong_domain_and_bad_params() {
        let s = series(&[0.0]);
        assert!(apply_timeseries(&s, &AugmentationSpec::HorizontalFlip, &mut rng()).is_err());
        assert!(apply_image(&Image::zeros(2), &AugmentationSpec::packet_loss(), &mut rng()).is_err());
        assert!(AugmentationSpec::PacketLoss { p: 1.5 }.validate().is_err());
        assert!(AugmentationSpec::ChangeRtt {
            alpha_lo: 0.0,
            alpha_hi: 1.0
        }
        .validate()
        .is_err());
        assert!(AugmentationSpec::TimeShift { b_lo: 1.0, b_hi: -1.0 }
            .validate()
            .is_err());
    }

    #[test]
    fn flip_moves_column() {
        let mut img = Image::zeros(32);
        img.set(5, 0, 3.0);
        let f = horizontal_flip(&img);
        assert_eq!(f.get(5, 31), 3.0);
        assert_eq!(f.data.iter().sum::<f32>(), 3.0);
        assert_eq!(horizontal_flip(&f), img);
    }

    #[test]
    fn rotation_quarter_turn_and_identity() {
        let mut img = Image::zeros(3);
        img.set(0, 1, 1.0);
        assert_eq!(rotate(&img, 0.0), img);
        let r = rotate(&img, 90.0);
        assert_eq!(r.get(1, 2), 1.0);
        assert_eq!(r.data.iter().sum::<f32>(), 1.0);
        let spec = AugmentationSpec::Rotate { max_degrees: 0.0 };
        assert_eq!(apply_image(&img, &spec, &mut rng()).unwrap(), img);
    }

    #[test]
    fn color_jitter_identity_and_clamp() {
        let img = Image::from_vec(2, vec![0.0, 1.0, 2.0, 4.0]);
        assert_eq!(color_jitter(&img, 1.0, 0.0), img);
        let dark = color_jitter(&img, 1.0, -0.5);
        assert_eq!(dark.data, vec![0.0, 0.0, 0.0, 2.0]);
        let spec = AugmentationSpec::ColorJitter {
            brightness_delta: 0.0,
            contrast_delta: 0.0,
        };
        assert_eq!(apply_image(&img, &spec, &mut rng()).unwrap(), img);
    }

    #[test]
    fn views_identity_pairs() {
        let s = series(&[0.0, 1.0, 3.0, 7.5]);
        let fc = FlowpicConfig::default();
        let base = fc.image(&s);
        let (a, b) = make_views(&s, (AugmentationSpec::NoAug, AugmentationSpec::NoAug), &fc, &mut rng()).unwrap();
        assert_eq!((a.clone(), b), (base.clone(), base.clone()));
        let degenerate = (
            AugmentationSpec::ChangeRtt {
                alpha_lo: 1.0,
                alpha_hi: 1.0,
            },
            AugmentationSpec::TimeShift { b_lo: 0.0, b_hi: 0.0 },
        );
        let (a, b) = make_views(&s, degenerate, &fc, &mut rng()).unwrap();
        assert_eq!(a, base);
        assert_eq!(b, base);
    }

    #[test]
    fn views_are_seeded() {
        let s = series(&[0.0, 1.0, 3.0, 7.5, 9.0, 12.0]);
        let fc = FlowpicConfig::default();
        let pair = (AugmentationSpec::change_rtt(), AugmentationSpec::time_shift());
        let first = make_views(&s, pair, &fc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let second = make_views(&s, pair, &fc, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn expansion_sizes() {
        let s = series(&[0.0, 1.0]);
        let fc = FlowpicConfig::default();
        let samples = vec![s.clone(); 100];
        let out = expand_training_set(&samples, &AugmentationSpec::change_rtt(), 10, &fc, &mut rng()).unwrap();
        assert_eq!(out.len(), 1000);

        let out = expand_training_set(std::slice::from_ref(&s), &AugmentationSpec::NoAug, 3, &fc, &mut rng()).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|m| *m == fc.image(&s)));

        let two = vec![s.clone(), series(&[0.0, 5.0, 6.0])];
        let id = AugmentationSpec::Rotate { max_degrees: 0.0 };
        let out = expand_training_set(&two, &id, 1, &fc, &mut rng()).unwrap();
        assert_eq!(out, vec![fc.image(&two[0]), fc.image(&two[1])]);
        assert!(expand_training_set(&two, &id, 0, &fc, &mut rng()).is_err());
    }

    #[test]
    fn spec_serde_defaults() {
        let s: AugmentationSpec = serde_json::from_str(r#"{"kind":"change_rtt","params":{}}"#).unwrap();
        assert_eq!(s, AugmentationSpec::change_rtt());
        let s: AugmentationSpec = serde_json::from_str(r#"{"kind":"packet_loss","params":{"p":0.2}}"#).unwrap();
        assert_eq!(s, AugmentationSpec::PacketLoss { p: 0.2 });
        let s: AugmentationSpec = serde_json::from_str(r#"{"kind":"horizontal_flip"}"#).unwrap();
        assert_eq!(s, AugmentationSpec::HorizontalFlip);
        let s: AugmentationSpec = serde_json::from_str(r#"{"kind":"rotate"}"#).unwrap();
        assert_eq!(s, AugmentationSpec::rotate());
        let s: AugmentationSpec = toml::from_str("kind = \"time_shift\"\nparams = { b_hi = 2 }").unwrap();
        assert_eq!(s, AugmentationSpec::TimeShift { b_lo: -1.0, b_hi: 2.0 });
        for bad in [
            r#"{"kind":"warp"}"#,
            r#"{"kind":"rotate","params":{"degrees":3}}"#,
            r#"{"kind":"packet_loss","params":{"p":"x"}}"#,
            r#"{"kind":"no_aug","extra":1}"#,
        ] {
            assert!(serde_json::from_str::<AugmentationSpec>(bad).is_err(), "{bad}");
        }
        let back: AugmentationSpec =
            serde_json::from_str(&serde_json::to_string(&AugmentationSpec::color_jitter()).unwrap()).unwrap();
        assert_eq!(back, AugmentationSpec::color_jitter());
    }
}
