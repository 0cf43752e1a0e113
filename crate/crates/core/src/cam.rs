//! Class activation maps and concentration scores.
//!
//! Because the classifier is linear, bias-free and applied after global
//! average pooling, the class-`c` logit equals the spatial mean of
//! `A_c(u, v) = Σ_h w[c][h] · a_h(u, v)`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    /// `[C × H × W]`
    pub maps: Tensor,
    /// Spatial means of `maps`, one per class.
    pub logits: Vec<f64>,
}

impl CamResult {
    pub fn classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[2]
    }

    /// The `H × W` map for `class`.
    pub fn map(&self, class: usize) -> Tensor {
        let hw = self.height() * self.width();
        Tensor::new(
            vec![self.height(), self.width()],
            self.maps.data()[class * hw..(class + 1) * hw].to_vec(),
        )
        .expect("slice of maps")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcentrationScore {
    pub ratio: f64,
    /// Set when the map has no positive mass; `ratio` is then 0.
    pub degenerate: bool,
}

/// CAM for one sample: `activations [H_feat × H × W]`, `weight [C × H_feat]`.
pub fn compute_cam(activations: &Tensor, weight: &Tensor) -> Result<CamResult> {
    let (feat, h, w) = match *activations.shape() {
        [f, h, w] => (f, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: activations.shape().to_vec(),
                reason: "activations must be [features, h, w]".into(),
            })
        }
    };
    if weight.rank() != 2 || weight.shape()[1] != feat {
        return Err(Error::ShapeMismatch {
            op: "compute_cam",
            left: activations.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let classes = weight.shape()[0];
    let hw = h * w;
    let a = activations.data();
    let mut maps = vec![0.0; classes * hw];
    for c in 0..classes {
        let out = &mut maps[c * hw..(c + 1) * hw];
        for (hh, &wc) in weight.row(c).iter().enumerate() {
            for (o, av) in out.iter_mut().zip(&a[hh * hw..(hh + 1) * hw]) {
                *o += wc * av;
            }
        }
    }
    let logits = maps
        .chunks_exact(hw.max(1))
        .map(|m| {
            let mut s = 0.0;
            for v in m {
                s += v;
            }
            s / hw as f64
        })
        .collect();
    Ok(CamResult {
        maps: Tensor::new(vec![classes, h, w], maps)?,
        logits,
    })
}

/// Fraction of the positive part of `A_class` that falls inside `mask`.
pub fn concentration(cam: &CamResult, class: usize, mask: &[bool]) -> Result<ConcentrationScore> {
    let hw = cam.height() * cam.width();
    if mask.len() != hw {
        return Err(Error::ShapeMismatch {
            op: "concentration",
            left: vec![cam.height(), cam.width()],
            right: vec![mask.len()],
        });
    }
    if class >= cam.classes() {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: cam.classes(),
        });
    }
    let map = &cam.maps.data()[class * hw..(class + 1) * hw];
    let (mut inside, mut total) = (0.0, 0.0);
    for (v, &m) in map.iter().zip(mask) {
        let pos = v.max(0.0);
        total += pos;
        if m {
            inside += pos;
        }
    }
    if total <= 0.0 {
        return Ok(ConcentrationScore {
            ratio: 0.0,
            degenerate: true,
        });
    }
    Ok(ConcentrationScore {
        ratio: (inside / total).clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Nearest-neighbour block replication of an `H × W` map to `H' × W'`.
pub fn upsample_nearest(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: map.shape().to_vec(),
                reason: "map must be [h, w]".into(),
            })
        }
    };
    if h == 0 || w == 0 || !out_h.is_multiple_of(h) || !out_w.is_multiple_of(w) {
        return Err(Error::InvalidShape {
            shape: vec![out_h, out_w],
            reason: format!("not an integer multiple of {h}×{w}"),
        });
    }
    let (sh, sw) = (out_h / h, out_w / w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for u in 0..out_h {
        for v in 0..out_w {
            data.push(map.data()[(u / sh) * w + v / sw]);
        }
    }
    Tensor::new(vec![out_h, out_w], data)
}

/// Binary PGM (P5) bytes of a map, min-max normalized to `0..=255`.
/// A constant map renders black.
pub fn pgm_bytes(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: map.shape().to_vec(),
                reason: "map must be [h, w]".into(),
            })
        }
    };
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(map: &Tensor, path: &Path) -> Result<()> {
    let bytes = pgm_bytes(map)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// `cam_<sample>_<class>.pgm`
pub fn pgm_name(sample: usize, class: usize) -> String {
    format!("cam_{sample}_{class}.pgm")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn single_channel_unit_weight() {
        let a = Tensor::ones(&[1, 3, 3]);
        let w = Tensor::ones(&[1, 1]);
        let cam = compute_cam(&a, &w).unwrap();
        assert!(cam.maps.data().iter().all(|&v| v == 1.0));
        assert_eq!(cam.logits, vec![1.0]);
    }

    #[test]
    fn zero_weights_zero_maps() {
        let mut rng = SplitMix64::new(1);
        let a = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.uniform()).collect()).unwrap();
        let cam = compute_cam(&a, &Tensor::zeros(&[3, 2])).unwrap();
        assert!(cam.maps.data().iter().all(|&v| v == 0.0));
        assert_eq!(cam.maps.shape(), &[3, 2, 2]);
    }

    #[test]
    fn shape_errors() {
        assert!(compute_cam(&Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[3, 3])).is_err());
        assert!(compute_cam(&Tensor::zeros(&[2, 2]), &Tensor::zeros(&[3, 2])).is_err());
    }

    fn cam_of(map: Vec<f64>, h: usize, w: usize) -> CamResult {
        compute_cam(&Tensor::new(vec![1, h, w], map).unwrap(), &Tensor::ones(&[1, 1])).unwrap()
    }

    fn quadrant_mask(h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| i / w < h / 2 && i % w < w / 2).collect()
    }

    #[test]
    fn concentration_examples() {
        let mask = quadrant_mask(4, 4);
        let inside: Vec<f64> = mask.iter().map(|&m| if m { 2.0 } else { -1.0 }).collect();
        let s = concentration(&cam_of(inside, 4, 4), 0, &mask).unwrap();
        assert_eq!(s.ratio, 1.0);

        let s = concentration(&cam_of(vec![3.0; 16], 4, 4), 0, &mask).unwrap();
        assert!((s.ratio - 0.25).abs() < 1e-15);
        assert!(!s.degenerate);

        let s = concentration(&cam_of(vec![-1.0; 16], 4, 4), 0, &mask).unwrap();
        assert_eq!(s.ratio, 0.0);
        assert!(s.degenerate);

        assert!(concentration(&cam_of(vec![1.0; 16], 4, 4), 0, &mask[..3]).is_err());
        assert!(concentration(&cam_of(vec![1.0; 16], 4, 4), 1, &mask).is_err());
    }

    #[test]
    fn concentration_matches_two_pass_oracle_and_is_scale_invariant() {
        let mut rng = SplitMix64::new(42);
        for _ in 0..200 {
            let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
            let map: Vec<f64> = (0..h * w).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let mask: Vec<bool> = (0..h * w).map(|_| rng.uniform() < 0.4).collect();
            // pass 1: total positive mass; pass 2: positive mass under the mask
            let total: f64 = map.iter().filter(|v| **v > 0.0).sum();
            let inside: f64 = map.iter().zip(&mask).filter(|(v, m)| **m && **v > 0.0).map(|(v, _)| v).sum();
            let want = if total > 0.0 { inside / total } else { 0.0 };
            let got = concentration(&cam_of(map.clone(), h, w), 0, &mask).unwrap().ratio;
            assert!((got - want).abs() < 1e-12);
            let scaled: Vec<f64> = map.iter().map(|v| v * 7.5).collect();
            let got2 = concentration(&cam_of(scaled, h, w), 0, &mask).unwrap().ratio;
            assert!((got - got2).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_examples() {
        let one = Tensor::full(&[1, 1], 0.3);
        let up = upsample_nearest(&one, 4, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));

        let m = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(upsample_nearest(&m, 2, 2).unwrap(), m);

        let up = upsample_nearest(&m, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(up.data(), &want);

        assert!(upsample_nearest(&m, 3, 4).is_err());
    }

    #[test]
    fn pgm_header_and_normalization() {
        let m = Tensor::from_rows(&[vec![-1.0, 1.0, 0.0]]).unwrap();
        let bytes = pgm_bytes(&m).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 255, 128]);
        assert_eq!(pgm_name(3, 1), "cam_3_1.pgm");
    }
}
