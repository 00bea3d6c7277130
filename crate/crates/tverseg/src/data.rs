//! Synthetic imbalanced multi-channel volumes, the `TVOL1` on-disk format,
//! and two-fold cross-validation splits.
//!
//! A subject is a volume with a handful of random ellipsoidal lesions.
//! Each channel adds its own lesion-intensity offset over its background
//! mean, each lesion carries a random brightness scale (so some lesions are
//! faint), and i.i.d. Gaussian noise goes on top. The point is class
//! imbalance plus a learnable but ambiguous signal, not anatomical realism.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 5] = b"TVOL1";

/// Per-channel intensity model: background level and the (full-brightness)
/// lesion level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelContrast {
    pub background_mean: f64,
    pub lesion_mean: f64,
}

/// Generator configuration. Defaults give a 64^3 volume with roughly 0.2%
/// foreground, echoing the >500:1 voxel imbalance of lesion data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub volume_shape: [usize; 3],
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_fraction")]
    pub foreground_fraction_target: f64,
    pub lesion_count_range: [usize; 2],
    pub lesion_radius_range: [f64; 2],
    pub noise_sigma: f64,
    pub channel_contrasts: Vec<ChannelContrast>,
    /// Per-lesion brightness multiplier range; values below 1 make lesions
    /// fainter than the nominal contrast.
    #[serde(default = "default_intensity_range")]
    pub lesion_intensity_range: [f64; 2],
    /// Radial intensity falloff inside each blob: a voxel at squared
    /// ellipsoid coordinate rho^2 (1 at the boundary) is scaled by
    /// 1 - falloff * rho^2, so cores stay bright and rims fade.
    #[serde(default)]
    pub lesion_edge_falloff: f64,
    /// Unlabeled lesion-mimicking blobs. Their per-channel contrast is the
    /// lesion contrast scaled by `distractor_channel_profile`, so they are
    /// separable from true lesions only through the channels the profile
    /// suppresses.
    #[serde(default = "default_distractor_count")]
    pub distractor_count_range: [usize; 2],
    #[serde(default)]
    pub distractor_channel_profile: Vec<f64>,
    pub seed: u64,
}

fn default_distractor_count() -> [usize; 2] {
    [0, 0]
}

fn default_channels() -> usize {
    3
}

fn default_fraction() -> f64 {
    0.002
}

fn default_intensity_range() -> [f64; 2] {
    [0.7, 1.3]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_shape: [64, 64, 64],
            channels: 3,
            foreground_fraction_target: 0.002,
            lesion_count_range: [2, 4],
            lesion_radius_range: [2.0, 5.0],
            noise_sigma: 0.5,
            channel_contrasts: vec![
                ChannelContrast {
                    background_mean: 0.0,
                    lesion_mean: 1.2,
                },
                ChannelContrast {
                    background_mean: 0.0,
                    lesion_mean: 0.8,
                },
                ChannelContrast {
                    background_mean: 0.0,
                    lesion_mean: 1.6,
                },
            ],
            lesion_intensity_range: [0.7, 1.3],
            lesion_edge_falloff: 0.0,
            distractor_count_range: [0, 0],
            distractor_channel_profile: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&e| e == 0) {
            return Err(Error::config("volume extents must be >= 1"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if self.channel_contrasts.len() != self.channels {
            return Err(Error::config(format!(
                "channel_contrasts has {} entries for {} channels",
                self.channel_contrasts.len(),
                self.channels
            )));
        }
        if !(self.foreground_fraction_target > 0.0 && self.foreground_fraction_target < 0.5) {
            return Err(Error::config(format!(
                "foreground_fraction_target must lie in (0, 0.5), got {}",
                self.foreground_fraction_target
            )));
        }
        let [rmin, rmax] = self.lesion_radius_range;
        if !(rmin > 0.0 && rmax >= rmin) {
            return Err(Error::config(format!(
                "lesion radius range must be positive and ordered, got [{rmin}, {rmax}]"
            )));
        }
        let [cmin, cmax] = self.lesion_count_range;
        if cmin == 0 || cmax < cmin {
            return Err(Error::config(format!(
                "lesion count range must be ordered and >= 1, got [{cmin}, {cmax}]"
            )));
        }
        let [imin, imax] = self.lesion_intensity_range;
        if !(imin > 0.0 && imax >= imin) {
            return Err(Error::config(format!(
                "lesion intensity range must be positive and ordered, got [{imin}, {imax}]"
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("noise_sigma must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lesion_edge_falloff) {
            return Err(Error::config(format!(
                "lesion_edge_falloff must lie in [0, 1], got {}",
                self.lesion_edge_falloff
            )));
        }
        let [dmin, dmax] = self.distractor_count_range;
        if dmax < dmin {
            return Err(Error::config(format!(
                "distractor count range must be ordered, got [{dmin}, {dmax}]"
            )));
        }
        if dmax > 0 && self.distractor_channel_profile.len() != self.channels {
            return Err(Error::config(format!(
                "distractor_channel_profile has {} entries for {} channels",
                self.distractor_channel_profile.len(),
                self.channels
            )));
        }
        let margin = rmax.ceil() as usize;
        for (axis, &extent) in ["depth", "height", "width"]
            .iter()
            .zip(self.volume_shape.iter())
        {
            if extent < 2 * margin + 1 {
                return Err(Error::config(format!(
                    "lesions of radius up to {rmax} cannot fit along {axis} (extent {extent})"
                )));
            }
        }
        Ok(())
    }
}

/// One synthetic subject: image volume, binary lesion mask, identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub image: Tensor,
    pub labels: Tensor,
    pub subject_id: String,
}

impl LabeledVolume {
    pub fn foreground_fraction(&self) -> f64 {
        self.labels.sum() / self.labels.len() as f64
    }
}

const MAX_GENERATION_ATTEMPTS: usize = 64;

/// Generates one subject deterministically from (config.seed, subject_index).
/// Lesion sets whose realized foreground fraction falls outside
/// [0.2x, 5x] of the target are redrawn.
pub fn generate_subject(config: &SynthConfig, subject_index: usize) -> Result<LabeledVolume> {
    config.validate()?;
    let [d, h, w] = config.volume_shape;
    let n_voxels = d * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(subject_index as u64);

    let lo = 0.2 * config.foreground_fraction_target;
    let hi = 5.0 * config.foreground_fraction_target;

    let mut labels = Vec::new();
    let mut scale_field = Vec::new();
    let mut accepted = false;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        labels = vec![0.0f64; n_voxels];
        scale_field = vec![0.0f64; n_voxels];
        let count = rng.gen_range(config.lesion_count_range[0]..=config.lesion_count_range[1]);
        for _ in 0..count {
            let [rmin, rmax] = config.lesion_radius_range;
            let semi = [
                rng.gen_range(rmin..=rmax),
                rng.gen_range(rmin..=rmax),
                rng.gen_range(rmin..=rmax),
            ];
            let brightness = rng.gen_range(
                config.lesion_intensity_range[0]..=config.lesion_intensity_range[1],
            );
            let mut center = [0.0f64; 3];
            for (axis, (&extent, &r)) in [d, h, w].iter().zip(semi.iter()).enumerate() {
                let m = r.ceil();
                center[axis] = rng.gen_range(m..=(extent as f64 - 1.0 - m));
            }
            let z_range = (center[0] - semi[0]).floor() as usize..=(center[0] + semi[0]).ceil() as usize;
            for z in z_range {
                let dz = (z as f64 - center[0]) / semi[0];
                let y_range =
                    (center[1] - semi[1]).floor() as usize..=(center[1] + semi[1]).ceil() as usize;
                for y in y_range {
                    let dy = (y as f64 - center[1]) / semi[1];
                    let x_range = (center[2] - semi[2]).floor() as usize
                        ..=(center[2] + semi[2]).ceil() as usize;
                    for x in x_range {
                        let dx = (x as f64 - center[2]) / semi[2];
                        let rho_sq = dz * dz + dy * dy + dx * dx;
                        if rho_sq <= 1.0 {
                            let idx = (z * h + y) * w + x;
                            labels[idx] = 1.0;
                            let v = brightness * (1.0 - config.lesion_edge_falloff * rho_sq);
                            if v > scale_field[idx] {
                                scale_field[idx] = v;
                            }
                        }
                    }
                }
            }
        }
        let fraction = labels.iter().sum::<f64>() / n_voxels as f64;
        if fraction >= lo && fraction <= hi {
            accepted = true;
            break;
        }
    }
    if !accepted {
        return Err(Error::config(format!(
            "could not realize a foreground fraction in [{lo:.6}, {hi:.6}] after \
             {MAX_GENERATION_ATTEMPTS} attempts; lesion count/radius ranges do not \
             match the target"
        )));
    }

    // unlabeled distractor blobs; drawn after the accepted lesion layout so
    // retries never consume their stream
    let mut distractor_field = vec![0.0f64; n_voxels];
    if config.distractor_count_range[1] > 0 {
        let count = rng
            .gen_range(config.distractor_count_range[0]..=config.distractor_count_range[1]);
        for _ in 0..count {
            let [rmin, rmax] = config.lesion_radius_range;
            let semi = [
                rng.gen_range(rmin..=rmax),
                rng.gen_range(rmin..=rmax),
                rng.gen_range(rmin..=rmax),
            ];
            let brightness = rng.gen_range(
                config.lesion_intensity_range[0]..=config.lesion_intensity_range[1],
            );
            let mut center = [0.0f64; 3];
            for (axis, (&extent, &r)) in [d, h, w].iter().zip(semi.iter()).enumerate() {
                let m = r.ceil();
                center[axis] = rng.gen_range(m..=(extent as f64 - 1.0 - m));
            }
            let z_range =
                (center[0] - semi[0]).floor() as usize..=(center[0] + semi[0]).ceil() as usize;
            for z in z_range {
                let dz = (z as f64 - center[0]) / semi[0];
                let y_range = (center[1] - semi[1]).floor() as usize
                    ..=(center[1] + semi[1]).ceil() as usize;
                for y in y_range {
                    let dy = (y as f64 - center[1]) / semi[1];
                    let x_range = (center[2] - semi[2]).floor() as usize
                        ..=(center[2] + semi[2]).ceil() as usize;
                    for x in x_range {
                        let dx = (x as f64 - center[2]) / semi[2];
                        let rho_sq = dz * dz + dy * dy + dx * dx;
                        if rho_sq <= 1.0 {
                            let idx = (z * h + y) * w + x;
                            let v = brightness * (1.0 - config.lesion_edge_falloff * rho_sq);
                            if v > distractor_field[idx] {
                                distractor_field[idx] = v;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut image = vec![0.0f64; n_voxels * config.channels];
    for (voxel_idx, chunk) in image.chunks_exact_mut(config.channels).enumerate() {
        let scale = scale_field[voxel_idx];
        let distractor = distractor_field[voxel_idx];
        for (c, value) in chunk.iter_mut().enumerate() {
            let contrast = config.channel_contrasts[c];
            let offset = contrast.lesion_mean - contrast.background_mean;
            let mut v = contrast.background_mean + scale * offset;
            if distractor > 0.0 {
                v += distractor * config.distractor_channel_profile[c] * offset;
            }
            if config.noise_sigma > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v += config.noise_sigma * z;
            }
            // quantize through f32 so the TVOL1 round trip is the identity
            *value = v as f32 as f64;
        }
    }

    Ok(LabeledVolume {
        image: Tensor::new(vec![d, h, w, config.channels], image)?,
        labels: Tensor::new(vec![d, h, w], labels)?,
        subject_id: format!("subject_{subject_index:03}"),
    })
}

/// Shuffles subjects into two disjoint, exhaustive folds whose sizes differ
/// by at most one (the first fold takes the extra subject).
pub fn two_fold_split(
    subjects: Vec<LabeledVolume>,
    seed: u64,
) -> Result<(Vec<LabeledVolume>, Vec<LabeledVolume>)> {
    if subjects.len() < 2 {
        return Err(Error::config(format!(
            "two-fold split needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let n = subjects.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = n.div_ceil(2);
    let pick: std::collections::HashSet<usize> = order[..cut].iter().copied().collect();
    let mut fold_a = Vec::with_capacity(cut);
    let mut fold_b = Vec::with_capacity(n - cut);
    for (i, subject) in subjects.into_iter().enumerate() {
        if pick.contains(&i) {
            fold_a.push(subject);
        } else {
            fold_b.push(subject);
        }
    }
    Ok((fold_a, fold_b))
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    shape: [usize; 3],
    channels: usize,
    dtype: String,
    label_dtype: String,
    subject_id: String,
}

/// Writes a volume as `TVOL1`: magic, length-prefixed JSON header,
/// little-endian f32 image payload, u8 label payload.
pub fn write_volume(path: &Path, vol: &LabeledVolume) -> Result<()> {
    let s = vol.image.shape();
    if s.len() != 4 || vol.labels.shape() != &s[..3] {
        return Err(Error::shape_mismatch(
            "volume to write",
            "(d, h, w, c) image with (d, h, w) labels",
            (vol.image.shape(), vol.labels.shape()),
        ));
    }
    let header = VolumeHeader {
        shape: [s[0], s[1], s[2]],
        channels: s[3],
        dtype: "f32".into(),
        label_dtype: "u8".into(),
        subject_id: vol.subject_id.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(
        VOLUME_MAGIC.len() + 4 + header_bytes.len() + vol.image.len() * 4 + vol.labels.len(),
    );
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for &v in vol.image.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &g in vol.labels.iter() {
        buf.push(if g != 0.0 { 1 } else { 0 });
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_exact_or_truncated(
    reader: &mut impl Read,
    buf: &mut [u8],
    context: &str,
) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                context: context.into(),
            }
        } else {
            Error::Io(e)
        }
    })
}

/// Reads a `TVOL1` volume, widening the image to f64.
pub fn read_volume(path: &Path) -> Result<LabeledVolume> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 5];
    read_exact_or_truncated(&mut file, &mut magic, "volume magic")?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(VOLUME_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_or_truncated(&mut file, &mut len_bytes, "volume header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or_truncated(&mut file, &mut header_bytes, "volume header")?;
    let header: VolumeHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::HeaderMismatch {
            message: format!("volume header: {e}"),
        })?;
    if header.dtype != "f32" || header.label_dtype != "u8" {
        return Err(Error::HeaderMismatch {
            message: format!(
                "unsupported dtypes {}/{} (expected f32/u8)",
                header.dtype, header.label_dtype
            ),
        });
    }
    let [d, h, w] = header.shape;
    let n_voxels = d * h * w;
    let mut image_bytes = vec![0u8; n_voxels * header.channels * 4];
    read_exact_or_truncated(&mut file, &mut image_bytes, "volume image payload")?;
    let image: Vec<f64> = image_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut label_bytes = vec![0u8; n_voxels];
    read_exact_or_truncated(&mut file, &mut label_bytes, "volume label payload")?;
    let mut trailer = [0u8; 1];
    if file.read(&mut trailer)? != 0 {
        return Err(Error::HeaderMismatch {
            message: "volume file has trailing bytes beyond the label payload".into(),
        });
    }
    let labels: Vec<f64> = label_bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(0.0),
            1 => Ok(1.0),
            other => Err(Error::HeaderMismatch {
                message: format!("label byte {other} is not 0/1"),
            }),
        })
        .collect::<Result<_>>()?;
    Ok(LabeledVolume {
        image: Tensor::new(vec![d, h, w, header.channels], image)?,
        labels: Tensor::new(vec![d, h, w], labels)?,
        subject_id: header.subject_id,
    })
}
