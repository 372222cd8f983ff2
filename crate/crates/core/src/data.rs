//! Deterministic synthetic multi-view benchmark generator.
//!
//! Scenes render N moving discs in a unit arena from M corner viewpoints.
//! Each view applies an orientation-preserving affine warp plus
//! axis-specific corruption: odd views observe horizontal motion reliably
//! and jitter the vertical coordinate, even views the reverse, so several
//! motion classes (notably the two circle directions) are indistinguishable
//! from any single view by construction. Static per-view occluder
//! rectangles zero out pixels; a person at least 90% covered in a view gets
//! a MISSING box there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{BoundingBox, MultiViewClip};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Motion classes 0..=6; class `classes - 1` is the appearance pulse.
pub const MOTION_CLASSES: [&str; 7] = [
    "still", "move-x", "move-y", "osc-x", "osc-y", "circle-cw", "circle-ccw",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    pub scenes: usize,
    pub views: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub keyframes: usize,
    /// Static occluder rectangles per view.
    pub occluders: usize,
    /// Occluder side-length range in arena units.
    pub occluder_min: f64,
    pub occluder_max: f64,
    /// Amplitude of the corrupted-axis jitter; 0 disables corruption.
    pub corruption: f64,
    /// Probability that a person additionally carries the pulse class.
    pub pulse_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            scenes: 50,
            views: 4,
            persons_min: 2,
            persons_max: 3,
            frames: 8,
            height: 64,
            width: 64,
            classes: 8,
            keyframes: 1,
            occluders: 1,
            occluder_min: 0.25,
            occluder_max: 0.4,
            corruption: 0.25,
            pulse_prob: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.views < 2 {
            return Err(Error::Config(
                "need at least 2 views for multi-view classes".into(),
            ));
        }
        if self.persons_min < 1 || self.persons_min > self.persons_max {
            return Err(Error::Config("bad persons range".into()));
        }
        if self.frames < 2 || self.keyframes < 1 || self.keyframes > self.frames {
            return Err(Error::Config("bad frames/keyframes".into()));
        }
        // sizes above 1 are allowed so a blanketing occluder is expressible
        if !(0.0..=2.0).contains(&self.occluder_min)
            || self.occluder_max < self.occluder_min
            || self.occluder_max > 2.0
        {
            return Err(Error::Config("bad occluder size range".into()));
        }
        Ok(())
    }

    /// Flat key=value serialization (sorted keys, one per line).
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "classes={}\ncorruption={}\nframes={}\nheight={}\nkeyframes={}\n\
             occluder_max={}\noccluder_min={}\noccluders={}\npersons_max={}\n\
             persons_min={}\npulse_prob={}\nscenes={}\nseed={}\nviews={}\nwidth={}\n",
            self.classes,
            self.corruption,
            self.frames,
            self.height,
            self.keyframes,
            self.occluder_max,
            self.occluder_min,
            self.occluders,
            self.persons_max,
            self.persons_min,
            self.pulse_prob,
            self.scenes,
            self.seed,
            self.views,
            self.width
        );
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = SceneConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let bad = |msg: &str| Error::Parse {
                line: i + 1,
                msg: format!("{key}: {msg} ({val:?})"),
            };
            macro_rules! num {
                () => {
                    val.parse().map_err(|_| bad("invalid number"))?
                };
            }
            match key {
                "classes" => cfg.classes = num!(),
                "corruption" => cfg.corruption = num!(),
                "frames" => cfg.frames = num!(),
                "height" => cfg.height = num!(),
                "keyframes" => cfg.keyframes = num!(),
                "occluder_max" => cfg.occluder_max = num!(),
                "occluder_min" => cfg.occluder_min = num!(),
                "occluders" => cfg.occluders = num!(),
                "persons_max" => cfg.persons_max = num!(),
                "persons_min" => cfg.persons_min = num!(),
                "pulse_prob" => cfg.pulse_prob = num!(),
                "scenes" => cfg.scenes = num!(),
                "seed" => cfg.seed = num!(),
                "views" => cfg.views = num!(),
                "width" => cfg.width = num!(),
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("unknown scene config key {other}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One (clip, keyframe, view, person) annotation row. Labels are sorted
/// class indices; `bbox` is None when the person is fully occluded
/// (MISSING) in that view.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub clip: String,
    pub keyframe: usize,
    pub view: usize,
    pub person: usize,
    pub bbox: Option<BoundingBox>,
    pub labels: Vec<usize>,
}

pub fn clip_id(index: usize) -> String {
    format!("scene{index:04}")
}

struct Person {
    base: (f64, f64),
    radius: f64,
    brightness: f64,
    motion: usize,
    pulse: bool,
    labels: Vec<usize>,
}

struct ViewGeom {
    scale: f64,
    offset: (f64, f64),
    /// Per-person corrupted-axis jitter phase and cycle count.
    jitter: Vec<(f64, f64)>,
    /// Occluder rectangles (x1, y1, x2, y2) in view coordinates.
    occluders: Vec<(f64, f64, f64, f64)>,
}

const MOTION_AMPLITUDE: f64 = 0.15;

/// Disc center in arena coordinates at frame `f`.
fn motion_position(p: &Person, f: usize, frames: usize) -> (f64, f64) {
    let (x0, y0) = p.base;
    let a = MOTION_AMPLITUDE;
    let u = f as f64 / (frames - 1) as f64; // 0..1 across the clip
    let theta = 2.0 * std::f64::consts::PI * f as f64 / frames as f64;
    match p.motion {
        0 => (x0, y0),
        1 => (x0 + a * (2.0 * u - 1.0), y0),
        2 => (x0, y0 + a * (2.0 * u - 1.0)),
        3 => (x0 + a * theta.sin(), y0),
        4 => (x0, y0 + a * theta.sin()),
        5 => (x0 + a * theta.cos(), y0 - a * theta.sin()),
        _ => (x0 + a * theta.cos(), y0 + a * theta.sin()),
    }
}

/// Disc center as observed by view `m` at frame `f`: affine warp plus
/// jitter on the view's corrupted axis (even views corrupt x, odd corrupt
/// y, so odd views preserve horizontal motion and even views vertical).
fn observed_position(
    geom: &ViewGeom,
    view: usize,
    cfg: &SceneConfig,
    person_idx: usize,
    p: &Person,
    f: usize,
) -> (f64, f64) {
    let (mut x, mut y) = motion_position(p, f, cfg.frames);
    if cfg.corruption > 0.0 {
        let (phase, cycles) = geom.jitter[person_idx];
        let j = cfg.corruption
            * (2.0 * std::f64::consts::PI * cycles * f as f64 / cfg.frames as f64 + phase).sin();
        if view % 2 == 0 {
            x += j;
        } else {
            y += j;
        }
    }
    (
        geom.offset.0 + geom.scale * x,
        geom.offset.1 + geom.scale * y,
    )
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Fraction of the box area covered by the occluder union, via a 20x20
/// sample grid inside the box.
fn covered_fraction(bbox: &BoundingBox, occluders: &[(f64, f64, f64, f64)]) -> f64 {
    const G: usize = 20;
    let mut hit = 0usize;
    for iy in 0..G {
        for ix in 0..G {
            let x = bbox.x1 + (ix as f64 + 0.5) / G as f64 * (bbox.x2 - bbox.x1);
            let y = bbox.y1 + (iy as f64 + 0.5) / G as f64 * (bbox.y2 - bbox.y1);
            if occluders
                .iter()
                .any(|&(x1, y1, x2, y2)| x >= x1 && x < x2 && y >= y1 && y < y2)
            {
                hit += 1;
            }
        }
    }
    hit as f64 / (G * G) as f64
}

/// Generates one scene: a rendered multi-view clip plus its annotations.
/// Pure function of (config.seed, index).
pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<(MultiViewClip, Vec<Annotation>)> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let id = clip_id(index);
    let n = rng.gen_range(cfg.persons_min..=cfg.persons_max);
    let motion_kinds = (cfg.classes - 1).min(MOTION_CLASSES.len());

    let persons: Vec<Person> = (0..n)
        .map(|_| {
            let base = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75));
            let radius = rng.gen_range(0.06..0.10);
            let brightness = rng.gen_range(0.6..1.0);
            let motion = rng.gen_range(0..motion_kinds);
            let pulse = cfg.classes >= 2 && rng.gen::<f64>() < cfg.pulse_prob;
            let mut labels = vec![motion];
            if pulse {
                labels.push(cfg.classes - 1);
            }
            labels.sort_unstable();
            labels.dedup();
            Person {
                base,
                radius,
                brightness,
                motion,
                pulse,
                labels,
            }
        })
        .collect();

    const CORNERS: [(f64, f64); 4] = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    let geoms: Vec<ViewGeom> = (0..cfg.views)
        .map(|m| {
            let scale = rng.gen_range(0.7..0.9);
            let corner = CORNERS[m % 4];
            let offset = (corner.0 * (1.0 - scale), corner.1 * (1.0 - scale));
            let jitter = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        rng.gen_range(1.0..3.0),
                    )
                })
                .collect();
            let occluders = (0..cfg.occluders)
                .map(|_| {
                    let cx = rng.gen_range(0.2..0.8);
                    let cy = rng.gen_range(0.2..0.8);
                    let w = cfg.occluder_min
                        + rng.gen::<f64>() * (cfg.occluder_max - cfg.occluder_min);
                    let h = cfg.occluder_min
                        + rng.gen::<f64>() * (cfg.occluder_max - cfg.occluder_min);
                    (
                        (cx - w / 2.0).max(0.0),
                        (cy - h / 2.0).max(0.0),
                        (cx + w / 2.0).min(1.0),
                        (cy + h / 2.0).min(1.0),
                    )
                })
                .collect();
            ViewGeom {
                scale,
                offset,
                jitter,
                occluders,
            }
        })
        .collect();

    // infeasible configuration: occluders blanket every view completely
    let fully_blanketed = geoms.iter().all(|g| {
        g.occluders
            .iter()
            .any(|&(x1, y1, x2, y2)| x1 <= 0.0 && y1 <= 0.0 && x2 >= 1.0 && y2 >= 1.0)
    });
    if fully_blanketed && cfg.views > 0 {
        return Err(Error::Generation(format!(
            "scene {id}: occluders cover the full arena in all {} views",
            cfg.views
        )));
    }

    let (h, w, t) = (cfg.height, cfg.width, cfg.frames);
    let mut views = Vec::with_capacity(cfg.views);
    for (m, geom) in geoms.iter().enumerate() {
        let mut data = vec![0f32; t * h * w * 3];
        for f in 0..t {
            for (pi, p) in persons.iter().enumerate() {
                let (cx, cy) = observed_position(geom, m, cfg, pi, p, f);
                let r = p.radius * geom.scale;
                let value = if p.pulse {
                    p.brightness * (0.6 + 0.4 * (std::f64::consts::TAU * f as f64 / t as f64).sin())
                } else {
                    p.brightness
                };
                let iy0 = (((cy - r) * h as f64).floor().max(0.0)) as usize;
                let iy1 = ((((cy + r) * h as f64).ceil()) as usize).min(h);
                let ix0 = (((cx - r) * w as f64).floor().max(0.0)) as usize;
                let ix1 = ((((cx + r) * w as f64).ceil()) as usize).min(w);
                for iy in iy0..iy1 {
                    for ix in ix0..ix1 {
                        let px = (ix as f64 + 0.5) / w as f64;
                        let py = (iy as f64 + 0.5) / h as f64;
                        if (px - cx).powi(2) + (py - cy).powi(2) <= r * r {
                            let base = ((f * h + iy) * w + ix) * 3;
                            let v = (value as f32).max(data[base]);
                            data[base] = v;
                            data[base + 1] = v;
                            data[base + 2] = v;
                        }
                    }
                }
            }
            // occluders zero covered pixels after all discs render
            for &(x1, y1, x2, y2) in &geom.occluders {
                let iy0 = (y1 * h as f64).floor().max(0.0) as usize;
                let iy1 = ((y2 * h as f64).ceil() as usize).min(h);
                let ix0 = (x1 * w as f64).floor().max(0.0) as usize;
                let ix1 = ((x2 * w as f64).ceil() as usize).min(w);
                for iy in iy0..iy1 {
                    for ix in ix0..ix1 {
                        let px = (ix as f64 + 0.5) / w as f64;
                        let py = (iy as f64 + 0.5) / h as f64;
                        if px >= x1 && px < x2 && py >= y1 && py < y2 {
                            let base = ((f * h + iy) * w + ix) * 3;
                            data[base] = 0.0;
                            data[base + 1] = 0.0;
                            data[base + 2] = 0.0;
                        }
                    }
                }
            }
        }
        views.push(Tensor::new(vec![t, h, w, 3], data)?);
    }
    let clip = MultiViewClip::new(views)?;

    // keyframes at the midpoints of equal clip segments
    let mut annotations = Vec::new();
    for k in 0..cfg.keyframes {
        let frame = (2 * k + 1) * t / (2 * cfg.keyframes);
        for (m, geom) in geoms.iter().enumerate() {
            for (pi, p) in persons.iter().enumerate() {
                let (cx, cy) = observed_position(geom, m, cfg, pi, p, frame);
                let r = p.radius * geom.scale;
                // quantize to the CSV's canonical 6-decimal precision so the
                // on-disk annotations are lossless
                let q = |v: f64| (v * 1e6).round() / 1e6;
                let x1 = q((cx - r).clamp(0.0, 1.0));
                let y1 = q((cy - r).clamp(0.0, 1.0));
                let x2 = q((cx + r).clamp(0.0, 1.0));
                let y2 = q((cy + r).clamp(0.0, 1.0));
                let bbox = if x1 < x2 && y1 < y2 {
                    let b = BoundingBox::new(x1, y1, x2, y2)?;
                    if covered_fraction(&b, &geom.occluders) >= 0.9 {
                        None
                    } else {
                        Some(b)
                    }
                } else {
                    None // drifted fully outside the view
                };
                annotations.push(Annotation {
                    clip: id.clone(),
                    keyframe: k,
                    view: m,
                    person: pi,
                    bbox,
                    labels: p.labels.clone(),
                });
            }
        }
    }
    Ok((clip, annotations))
}

const CSV_HEADER: &str = "clip,keyframe,view,person,x1,y1,x2,y2,labels";

/// Canonical CSV serialization: fixed 6-decimal coordinates, labels joined
/// with ';', MISSING boxes as empty coordinate fields.
pub fn annotations_to_csv(annotations: &[Annotation]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for a in annotations {
        let coords = match &a.bbox {
            Some(b) => format!("{:.6},{:.6},{:.6},{:.6}", b.x1, b.y1, b.x2, b.y2),
            None => ",,,".to_string(),
        };
        let labels = a
            .labels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            a.clip, a.keyframe, a.view, a.person, coords, labels
        );
    }
    s
}

pub fn annotations_from_csv(text: &str) -> Result<Vec<Annotation>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad annotation header {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 9 fields, got {}", f.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad {what} {s:?}"),
            })
        };
        let coord = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad coordinate {s:?}"),
            })
        };
        let coords = &f[4..8];
        let empties = coords.iter().filter(|c| c.is_empty()).count();
        let bbox = match empties {
            4 => None,
            0 => Some(
                BoundingBox::new(coord(f[4])?, coord(f[5])?, coord(f[6])?, coord(f[7])?)
                    .map_err(|e| Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    })?,
            ),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "box must have all 4 coordinates or none".into(),
                })
            }
        };
        let labels = if f[8].is_empty() {
            Vec::new()
        } else {
            f[8].split(';')
                .map(|l| num(l, "label"))
                .collect::<Result<Vec<_>>>()?
        };
        out.push(Annotation {
            clip: f[0].to_string(),
            keyframe: num(f[1], "keyframe")?,
            view: num(f[2], "view")?,
            person: num(f[3], "person")?,
            bbox,
            labels,
        });
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    std::fs::write(path, annotations_to_csv(annotations))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    annotations_from_csv(&text)
}

/// Splits at person granularity: all rows of one (clip, person) land on the
/// same side. Retries shuffles until every class's relative frequency
/// difference between the sides is within 10%, or fails reporting the best
/// attempt.
pub fn split_dataset(
    annotations: &[Annotation],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Annotation>, Vec<Annotation>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction <= 0.0 {
        return Err(Error::Config(format!(
            "train fraction must be in (0,1), got {train_fraction}"
        )));
    }
    // one entry per person: their class multiset (each person counted once
    // per class, not once per view row)
    let mut person_classes: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for a in annotations {
        person_classes
            .entry((a.clip.clone(), a.person))
            .or_insert_with(|| a.labels.clone());
    }
    let persons: Vec<(String, usize)> = person_classes.keys().cloned().collect();
    if persons.len() < 2 {
        return Err(Error::Split(format!(
            "need at least 2 persons to split, got {}",
            persons.len()
        )));
    }
    let n_train = ((persons.len() as f64 * train_fraction).round() as usize)
        .clamp(1, persons.len() - 1);
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = person_classes.values().flatten().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    };

    let has_class: Vec<Vec<bool>> = persons
        .iter()
        .map(|p| classes.iter().map(|c| person_classes[p].contains(c)).collect())
        .collect();
    let n_eval = persons.len() - n_train;
    let worst_imbalance = |is_train: &[bool]| -> f64 {
        let mut worst = 0.0f64;
        for ci in 0..classes.len() {
            let mut tr = 0usize;
            let mut ev = 0usize;
            for (pi, &t) in is_train.iter().enumerate() {
                if has_class[pi][ci] {
                    if t {
                        tr += 1;
                    } else {
                        ev += 1;
                    }
                }
            }
            let ft = tr as f64 / n_train as f64;
            let fe = ev as f64 / n_eval as f64;
            worst = worst.max((ft - fe).abs() / ft.max(fe).max(1e-12));
        }
        worst
    };

    // seeded hill climbing: random restart splits, then accept train/eval
    // swaps that reduce the worst per-class relative imbalance
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<bool>)> = None;
    const RESTARTS: usize = 20;
    const SWAPS: usize = 2000;
    'restart: for _ in 0..RESTARTS {
        let mut order: Vec<usize> = (0..persons.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut is_train = vec![false; persons.len()];
        for &i in &order[..n_train] {
            is_train[i] = true;
        }
        let mut cur = worst_imbalance(&is_train);
        for _ in 0..SWAPS {
            if cur <= 0.10 {
                break;
            }
            let a = rng.gen_range(0..persons.len());
            let b = rng.gen_range(0..persons.len());
            if is_train[a] == is_train[b] {
                continue;
            }
            is_train.swap(a, b);
            let cand = worst_imbalance(&is_train);
            if cand < cur {
                cur = cand;
            } else {
                is_train.swap(a, b);
            }
        }
        if best.as_ref().map_or(true, |(b, _)| cur < *b) {
            best = Some((cur, is_train));
        }
        if cur <= 0.10 {
            break 'restart;
        }
    }
    let (worst, is_train) = best.expect("at least one attempt");
    if worst > 0.10 {
        return Err(Error::Split(format!(
            "no split within 10% class balance after {RESTARTS} restarts; best attempt {:.1}%",
            worst * 100.0
        )));
    }
    let train_idx: Vec<usize> = (0..persons.len()).filter(|&i| is_train[i]).collect();
    let train_set: std::collections::BTreeSet<&(String, usize)> =
        train_idx.iter().map(|&i| &persons[i]).collect();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for a in annotations {
        let key = (a.clip.clone(), a.person);
        if train_set.contains(&key) {
            train.push(a.clone());
        } else {
            eval.push(a.clone());
        }
    }
    Ok((train, eval))
}

/// Writes the full dataset: one `<clipid>.mvaf` per scene, the annotation
/// CSV, a manifest of clip ids, and the config as key=value.
pub fn generate_dataset(cfg: &SceneConfig, out_dir: &Path) -> Result<Vec<Annotation>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut all = Vec::new();
    let mut manifest = String::new();
    for i in 0..cfg.scenes {
        let (clip, annotations) = generate_scene(cfg, i)?;
        let id = clip_id(i);
        crate::encoder::write_clip(&out_dir.join(format!("{id}.mvaf")), &clip)?;
        manifest.push_str(&id);
        manifest.push('\n');
        all.extend(annotations);
    }
    write_annotations(&out_dir.join("annotations.csv"), &all)?;
    std::fs::write(out_dir.join("manifest.txt"), manifest)
        .map_err(|e| Error::io("manifest.txt", e))?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_kv())
        .map_err(|e| Error::io("config.txt", e))?;
    Ok(all)
}

/// Reads a dataset directory written by `generate_dataset`.
pub struct Dataset {
    pub config: SceneConfig,
    pub clip_ids: Vec<String>,
    pub annotations: Vec<Annotation>,
    root: std::path::PathBuf,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = SceneConfig::from_kv(
            &std::fs::read_to_string(dir.join("config.txt"))
                .map_err(|e| Error::io(dir.join("config.txt").display().to_string(), e))?,
        )?;
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::io(dir.join("manifest.txt").display().to_string(), e))?;
        let clip_ids = manifest.lines().map(String::from).collect();
        let annotations = read_annotations(&dir.join("annotations.csv"))?;
        Ok(Dataset {
            config,
            clip_ids,
            annotations,
            root: dir.to_path_buf(),
        })
    }

    pub fn load_clip(&self, id: &str) -> Result<MultiViewClip> {
        crate::encoder::read_clip(&self.root.join(format!("{id}.mvaf")))
    }
}
