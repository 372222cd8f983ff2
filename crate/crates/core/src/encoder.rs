//! Toy shared video encoder and RoIAlign person feature extraction.
//!
//! The encoder stands in for a full video transformer: per-frame patch
//! projection, temporal mean, and one pointwise FFN block with a residual.
//! RoIAlign cuts a fixed 7x7 crop out of the encoded feature map for each
//! person's box; persons occluded in a view get an exactly-zero crop.

use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::ffn;
use crate::params::Bound;
use crate::tensor::{read_tensor_from, write_tensor_to, Elem, Tape, Tensor, Var};

pub const ROI_SIZE: usize = 7;
pub const ROI_SAMPLES: usize = 2;

/// Normalized box in [0,1]^2 with x1 < x2 and y1 < y2. A missing
/// (fully occluded) person-view is represented as `Option::None` by callers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && (0.0..=1.0).contains(&x2)
            && (0.0..=1.0).contains(&y2)
            && x1 < x2
            && y1 < y2;
        if !ok {
            return Err(Error::Contract(format!(
                "invalid box ({x1},{y1})-({x2},{y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }
}

/// Synchronized multi-view clip: one `[T,H,W,3]` video tensor per view.
#[derive(Debug, Clone)]
pub struct MultiViewClip {
    pub views: Vec<Tensor<f32>>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl MultiViewClip {
    pub fn new(views: Vec<Tensor<f32>>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Contract("clip with no views".into()));
        }
        let shape = views[0].shape().to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Contract(format!(
                "view video must be [T,H,W,3], got {:?}",
                shape
            )));
        }
        for v in &views[1..] {
            if v.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "MultiViewClip",
                    lhs: shape,
                    rhs: v.shape().to_vec(),
                });
            }
        }
        Ok(MultiViewClip {
            frames: shape[0],
            height: shape[1],
            width: shape[2],
            views,
        })
    }
}

const CLIP_MAGIC: &[u8; 4] = b"MVAF";
const CLIP_VERSION: u32 = 1;

pub fn write_clip_to<W: Write>(w: &mut W, clip: &MultiViewClip) -> Result<()> {
    let err = |e| Error::io("<clip writer>", e);
    w.write_all(CLIP_MAGIC).map_err(err)?;
    w.write_all(&CLIP_VERSION.to_le_bytes()).map_err(err)?;
    for v in [
        clip.views.len() as u32,
        clip.frames as u32,
        clip.height as u32,
        clip.width as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(err)?;
    }
    for view in &clip.views {
        write_tensor_to(w, view)?;
    }
    Ok(())
}

pub fn read_clip_from<R: Read>(r: &mut R) -> Result<MultiViewClip> {
    let err = |e| Error::io("<clip reader>", e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Format(format!("bad clip magic {:?}", magic)));
    }
    let mut b4 = [0u8; 4];
    let mut next = || -> Result<u32> {
        r.read_exact(&mut b4).map_err(|e| Error::io("<clip reader>", e))?;
        Ok(u32::from_le_bytes(b4))
    };
    if next()? != CLIP_VERSION {
        return Err(Error::Format("unsupported clip version".into()));
    }
    let m = next()? as usize;
    let _dims = (next()?, next()?, next()?);
    let mut views = Vec::with_capacity(m);
    for _ in 0..m {
        views.push(read_tensor_from(r)?);
    }
    MultiViewClip::new(views)
}

pub fn write_clip(path: &Path, clip: &MultiViewClip) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_clip_to(&mut std::io::BufWriter::new(f), clip)
}

pub fn read_clip(path: &Path) -> Result<MultiViewClip> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_clip_from(&mut std::io::BufReader::new(f))
}

/// Encoder hyperparameters. Width `channels` echoes the encoder-size knob.
#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    pub patch: usize,
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 16,
            channels: 64,
        }
    }
}

/// Per-person, per-view 7x7xc feature crops; missing views are all-zero.
#[derive(Debug, Clone)]
pub struct PersonFeatureSet<T: Elem> {
    pub persons: usize,
    pub views: usize,
    pub channels: usize,
    features: Vec<Tensor<T>>,
    missing: Vec<bool>,
}

impl<T: Elem> PersonFeatureSet<T> {
    pub fn feature(&self, person: usize, view: usize) -> &Tensor<T> {
        &self.features[person * self.views + view]
    }

    pub fn is_missing(&self, person: usize, view: usize) -> bool {
        self.missing[person * self.views + view]
    }
}

/// Encodes one view video into an `[h, w, c]` feature map on the tape.
/// All views share the same encoder parameters.
pub fn toy_video_encode<T: Elem>(
    tape: &Tape<T>,
    bound: &Bound<T>,
    video: &Tensor<T>,
    cfg: &EncoderConfig,
) -> Result<Var<T>> {
    let shape = video.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::Config(format!(
            "encoder expects [T,H,W,3] video, got {:?}",
            shape
        )));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let p = cfg.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "video {h}x{w} not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let patch_len = p * p * 3;
    let v = tape.leaf(video);

    // gather pixels into [T * gh * gw, p*p*3] patch rows
    let mut coeffs = Vec::with_capacity(t * gh * gw * patch_len);
    for fr in 0..t {
        for py in 0..gh {
            for px in 0..gw {
                for ky in 0..p {
                    for kx in 0..p {
                        for ch in 0..3 {
                            let src = ((fr * h + py * p + ky) * w + px * p + kx) * 3 + ch;
                            coeffs.push(vec![(src, T::one())]);
                        }
                    }
                }
            }
        }
    }
    let patches = v.linear_map(Rc::new(coeffs), vec![t * gh * gw, patch_len])?;

    let proj = patches
        .matmul(bound.get("encoder.patch.weight")?)?
        .add_row(bound.get("encoder.patch.bias")?)?;
    let c = cfg.channels;
    let temporal_mean = proj
        .reshape(vec![t, gh * gw, c])?
        .mean_axis(0)?;
    let mixed = ffn(
        &temporal_mean,
        bound.get("encoder.ffn.fc1.weight")?,
        bound.get("encoder.ffn.fc1.bias")?,
        bound.get("encoder.ffn.fc2.weight")?,
        bound.get("encoder.ffn.fc2.bias")?,
    )?;
    temporal_mean.add(&mixed)?.reshape(vec![gh, gw, c])
}

/// Bilinear sampling weights for one output grid over the `[h, w]` spatial
/// plane. Boxes are normalized [0,1] and scaled by `(h-1, w-1)`; samples
/// outside the map clamp to the edge.
pub fn roi_align_spatial_coeffs(
    h: usize,
    w: usize,
    bbox: &BoundingBox,
    out: usize,
    samples: usize,
) -> Vec<Vec<(usize, f64)>> {
    let y1 = bbox.y1 * (h - 1) as f64;
    let y2 = bbox.y2 * (h - 1) as f64;
    let x1 = bbox.x1 * (w - 1) as f64;
    let x2 = bbox.x2 * (w - 1) as f64;
    let bin_h = (y2 - y1) / out as f64;
    let bin_w = (x2 - x1) / out as f64;
    let sample_weight = 1.0 / (samples * samples) as f64;
    let mut all = Vec::with_capacity(out * out);
    for by in 0..out {
        for bx in 0..out {
            let mut acc: Vec<(usize, f64)> = Vec::with_capacity(4 * samples * samples);
            for sy in 0..samples {
                for sx in 0..samples {
                    let y = y1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h;
                    let x = x1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w;
                    let y = y.clamp(0.0, (h - 1) as f64);
                    let x = x.clamp(0.0, (w - 1) as f64);
                    let y0 = y.floor() as usize;
                    let x0 = x.floor() as usize;
                    let y1i = (y0 + 1).min(h - 1);
                    let x1i = (x0 + 1).min(w - 1);
                    let fy = y - y0 as f64;
                    let fx = x - x0 as f64;
                    for (iy, ix, wgt) in [
                        (y0, x0, (1.0 - fy) * (1.0 - fx)),
                        (y0, x1i, (1.0 - fy) * fx),
                        (y1i, x0, fy * (1.0 - fx)),
                        (y1i, x1i, fy * fx),
                    ] {
                        if wgt == 0.0 {
                            continue;
                        }
                        let idx = iy * w + ix;
                        let wgt = wgt * sample_weight;
                        match acc.iter_mut().find(|(i, _)| *i == idx) {
                            Some((_, existing)) => *existing += wgt,
                            None => acc.push((idx, wgt)),
                        }
                    }
                }
            }
            all.push(acc);
        }
    }
    all
}

fn expand_coeffs_over_channels<T: Elem>(
    spatial: &[Vec<(usize, f64)>],
    channels: usize,
) -> Vec<Vec<(usize, T)>> {
    let mut out = Vec::with_capacity(spatial.len() * channels);
    for terms in spatial {
        for ch in 0..channels {
            out.push(
                terms
                    .iter()
                    .map(|&(idx, w)| (idx * channels + ch, T::from_f64(w)))
                    .collect(),
            );
        }
    }
    out
}

/// Differentiable RoIAlign over a tape-resident `[h, w, c]` feature map.
pub fn roi_align_var<T: Elem>(
    map: &Var<T>,
    bbox: &BoundingBox,
    out: usize,
    samples: usize,
) -> Result<Var<T>> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "roi_align expects [h,w,c] map, got {:?}",
            shape
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let spatial = roi_align_spatial_coeffs(h, w, bbox, out, samples);
    map.linear_map(
        Rc::new(expand_coeffs_over_channels(&spatial, c)),
        vec![out, out, c],
    )
}

/// RoIAlign on a plain tensor (no tape). Same sampling as `roi_align_var`.
pub fn roi_align<T: Elem>(
    map: &Tensor<T>,
    bbox: &BoundingBox,
    out: usize,
    samples: usize,
) -> Result<Tensor<T>> {
    let shape = map.shape();
    if shape.len() != 3 {
        return Err(Error::Contract(format!(
            "roi_align expects [h,w,c] map, got {:?}",
            shape
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let spatial = roi_align_spatial_coeffs(h, w, bbox, out, samples);
    let mut data = vec![T::zero(); out * out * c];
    for (bin, terms) in spatial.iter().enumerate() {
        for ch in 0..c {
            let mut s = T::zero();
            for &(idx, wgt) in terms {
                s = s + T::from_f64(wgt) * map.data()[idx * c + ch];
            }
            data[bin * c + ch] = s;
        }
    }
    Tensor::new(vec![out, out, c], data)
}

/// Runs the shared encoder once per view and RoIAligns every present
/// (person, view) box; missing boxes yield exactly-zero features.
pub fn extract_person_features<T: Elem>(
    videos: &[Tensor<T>],
    boxes: &[Vec<Option<BoundingBox>>],
    params: &crate::params::ParamStore<T>,
    cfg: &EncoderConfig,
) -> Result<PersonFeatureSet<T>> {
    if videos.is_empty() {
        return Err(Error::Contract("extract_person_features with no views".into()));
    }
    let views = videos.len();
    let persons = boxes.len();
    for (n, row) in boxes.iter().enumerate() {
        if row.len() != views {
            return Err(Error::Contract(format!(
                "person {n} has {} boxes for {views} views",
                row.len()
            )));
        }
    }
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let maps: Vec<Var<T>> = videos
        .iter()
        .map(|v| toy_video_encode(&tape, &bound, v, cfg))
        .collect::<Result<_>>()?;
    let c = cfg.channels;
    let mut features = Vec::with_capacity(persons * views);
    let mut missing = Vec::with_capacity(persons * views);
    for row in boxes {
        for (m, b) in row.iter().enumerate() {
            match b {
                Some(bbox) => {
                    features
                        .push(roi_align_var(&maps[m], bbox, ROI_SIZE, ROI_SAMPLES)?.value());
                    missing.push(false);
                }
                None => {
                    features.push(Tensor::zeros(vec![ROI_SIZE, ROI_SIZE, c]));
                    missing.push(true);
                }
            }
        }
    }
    Ok(PersonFeatureSet {
        persons,
        views,
        channels: c,
        features,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounding_box_validation() {
        assert!(BoundingBox::new(0.1, 0.1, 0.5, 0.5).is_ok());
        assert!(BoundingBox::new(0.5, 0.1, 0.1, 0.5).is_err());
        assert!(BoundingBox::new(-0.1, 0.1, 0.5, 0.5).is_err());
    }

    #[test]
    fn roi_align_constant_map() {
        let map = Tensor::<f64>::full(vec![5, 5, 2], 3.25);
        let b = BoundingBox::new(0.13, 0.27, 0.81, 0.92).unwrap();
        let out = roi_align(&map, &b, 7, 2).unwrap();
        for &v in out.data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_center_of_2x2_map() {
        // full box, 1x1 output, single sample at the bin center: the center
        // of [[1,2],[3,4]] interpolates to 2.5
        let map = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let out = roi_align(&map, &b, 1, 1).unwrap();
        assert!((out.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn roi_align_rejects_bad_rank() {
        let map = Tensor::<f64>::zeros(vec![5, 5]);
        let b = BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(roi_align(&map, &b, 7, 2).is_err());
    }

    #[test]
    fn clip_round_trip() {
        let views = vec![
            Tensor::<f32>::full(vec![2, 4, 4, 3], 0.5),
            Tensor::<f32>::full(vec![2, 4, 4, 3], 0.25),
        ];
        let clip = MultiViewClip::new(views).unwrap();
        let mut buf = Vec::new();
        write_clip_to(&mut buf, &clip).unwrap();
        assert_eq!(&buf[..4], b"MVAF");
        let back = read_clip_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.views.len(), 2);
        assert_eq!(back.views[0], clip.views[0]);
        assert_eq!(back.views[1], clip.views[1]);
    }
}
