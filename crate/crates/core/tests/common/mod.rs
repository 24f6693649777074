#![allow(dead_code)]

use boxseg_core::prompts::{make_prompts, quadrants, PromptMode, PromptSet};
use boxseg_core::Bbox;
use rand::Rng;

/// A random valid box inside `size × size`, at least 2 px on each side.
pub fn random_box<R: Rng>(rng: &mut R, size: usize) -> Bbox {
    let s = size as f64;
    let w = rng.random_range(2.0..s);
    let h = rng.random_range(2.0..s);
    let x = rng.random_range(0.0..=s - w);
    let y = rng.random_range(0.0..=s - h);
    let round = rng.random_bool(0.5);
    let b = Bbox::new(x, y, x + w, y + h);
    if round {
        Bbox::new(b.x_min.floor(), b.y_min.floor(), b.x_max.ceil().min(s), b.y_max.ceil().min(s))
    } else {
        b
    }
}

/// Intensity map with a random share of zero pixels, sometimes all zero.
pub fn random_intensity<R: Rng>(rng: &mut R, size: usize) -> Vec<f32> {
    let zero_share: f64 = match rng.random_range(0..4) {
        0 => 1.0,
        1 => 0.0,
        _ => rng.random_range(0.0..1.0),
    };
    (0..size * size)
        .map(|_| if rng.random_bool(zero_share) { 0.0 } else { rng.random_range(0.01f32..1.0) })
        .collect()
}

fn inside(b: &Bbox, x: f64, y: f64) -> bool {
    x >= b.x_min && x <= b.x_max && y >= b.y_min && y <= b.y_max
}

fn has_nonzero(b: &Bbox, intensity: &[f32], size: usize) -> bool {
    let (cols, rows) = b.pixel_ranges(size, size);
    rows.into_iter().any(|r| cols.clone().any(|c| intensity[r * size + c] != 0.0))
}

/// Every structural rule of a prompt set; returns the violated ones.
pub fn prompt_violations(b: &Bbox, intensity: &[f32], size: usize, mode: PromptMode, set: &PromptSet) -> Vec<String> {
    let mut v = Vec::new();
    if set.corners[0].x != b.x_min || set.corners[0].y != b.y_min || set.corners[1].x != b.x_max || set.corners[1].y != b.y_max {
        v.push("corners differ from box".into());
    }
    match mode {
        PromptMode::Train => {
            if set.point_box != *b || set.scribble_box != *b {
                v.push("train mode shrank the box".into());
            }
        }
        PromptMode::Infer => {
            let (w, h) = (b.width(), b.height());
            let check = |inner: &Bbox, lo: f64, hi: f64, what: &str, v: &mut Vec<String>| {
                let sw = inner.x_min - b.x_min;
                let sh = inner.y_min - b.y_min;
                let eps = 1e-9 * (1.0 + w.max(h));
                if !(sw >= lo * w - eps && sw <= hi * w + eps && sh >= lo * h - eps && sh <= hi * h + eps) {
                    v.push(format!("{what} shift ({sw}, {sh}) outside range"));
                }
                if (b.x_max - inner.x_max - sw).abs() > eps || (b.y_max - inner.y_max - sh).abs() > eps {
                    v.push(format!("{what} box not shrunk symmetrically"));
                }
                if !(inner.x_min > b.x_min && inner.x_max < b.x_max && inner.y_min > b.y_min && inner.y_max < b.y_max) {
                    v.push(format!("{what} box not strictly inside"));
                }
            };
            check(&set.point_box, 1.0 / 5.0, 2.0 / 5.0, "point", &mut v);
            check(&set.scribble_box, 1.0 / 8.0, 1.0 / 6.0, "scribble", &mut v);
        }
    }
    for (i, (p, q)) in set.points.iter().zip(quadrants(&set.point_box)).enumerate() {
        if !inside(&q, p.x, p.y) {
            v.push(format!("point {i} outside its quadrant"));
        }
        let on_pixel = p.x.fract() == 0.5 && p.y.fract() == 0.5;
        if has_nonzero(&q, intensity, size) {
            let (c, r) = (p.x as usize, p.y as usize);
            if !on_pixel || intensity[r * size + c] == 0.0 {
                v.push(format!("point {i} not on a non-zero pixel"));
            }
        } else if (p.x, p.y) != q.center() {
            v.push(format!("point {i} fallback is not the quadrant center"));
        }
    }
    if set.scribble.len() != size * size || set.scribble.iter().any(|&m| m > 1) {
        v.push("scribble not a binary size×size mask".into());
    }
    if set.polyline.len() > 4 {
        v.push("more than 4 control points".into());
    }
    let nonzero_box = has_nonzero(&set.scribble_box, intensity, size);
    if nonzero_box == set.polyline.is_empty() {
        v.push("polyline emptiness does not match box content".into());
    }
    if set.polyline.is_empty() && set.scribble.iter().any(|&m| m != 0) {
        v.push("empty polyline but non-zero scribble mask".into());
    }
    for &(c, r) in &set.polyline {
        if intensity[r * size + c] == 0.0 || !inside(&set.scribble_box, c as f64 + 0.5, r as f64 + 0.5) {
            v.push("control point off the non-zero box interior".into());
        }
    }
    for r in 0..size {
        for c in 0..size {
            if set.scribble[r * size + c] != 0 && !inside(&set.scribble_box, c as f64 + 0.5, r as f64 + 0.5) {
                v.push(format!("scribble pixel ({c}, {r}) outside box"));
            }
        }
    }
    if set.scribble.iter().filter(|&&m| m != 0).count() < set.polyline.len() {
        v.push("fewer scribble pixels than control points".into());
    }
    v
}

/// Runs the checker over `n` random (box, intensity, mode) draws and
/// returns the total number of violations and the first few messages.
pub fn prompt_invariant_sweep<R: Rng>(rng: &mut R, n: usize, size: usize) -> (usize, Vec<String>) {
    let mut count = 0;
    let mut first = Vec::new();
    let mut intensity = random_intensity(rng, size);
    for i in 0..n {
        if i % 50 == 0 {
            intensity = random_intensity(rng, size);
        }
        let b = random_box(rng, size);
        let mode = if rng.random_bool(0.5) { PromptMode::Train } else { PromptMode::Infer };
        let set = make_prompts(&b, &intensity, size, mode, rng);
        let v = prompt_violations(&b, &intensity, size, mode, &set);
        count += v.len();
        if first.len() < 5 {
            first.extend(v.into_iter().map(|m| format!("{b:?} {mode:?}: {m}")));
        }
    }
    (count, first)
}

/// Boundary pixels by direct neighbour inspection, as `(col, row)`.
pub fn brute_boundary(mask: &[u8], w: usize, h: usize) -> Vec<(i64, i64)> {
    let at = |c: i64, r: i64| c >= 0 && r >= 0 && c < w as i64 && r < h as i64 && mask[r as usize * w + c as usize] != 0;
    let mut out = Vec::new();
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if at(c, r) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dc, dr)| !at(c + dc, r + dr)) {
                out.push((c, r));
            }
        }
    }
    out
}

/// NSD from all pairwise boundary distances.
pub fn brute_nsd(a: &[u8], b: &[u8], w: usize, h: usize, tol: f64) -> f64 {
    let (ea, eb) = (a.iter().all(|&v| v == 0), b.iter().all(|&v| v == 0));
    if ea && eb {
        return 1.0;
    }
    if ea || eb {
        return 0.0;
    }
    let (ba, bb) = (brute_boundary(a, w, h), brute_boundary(b, w, h));
    let near = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter().any(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64) <= tol * tol)
    };
    let hits = ba.iter().filter(|p| near(p, &bb)).count() + bb.iter().filter(|p| near(p, &ba)).count();
    hits as f64 / (ba.len() + bb.len()) as f64
}

/// Random blobby binary mask: a union of a few random rectangles and discs.
pub fn random_mask<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<u8> {
    let mut m = vec![0u8; w * h];
    for _ in 0..rng.random_range(0..4) {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let rad = rng.random_range(1.0..w.max(h) as f64 / 3.0);
        let disc = rng.random_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                let hit = if disc { dx.hypot(dy) < rad } else { dx.abs() < rad && dy.abs() < rad * 0.6 };
                if hit {
                    m[r * w + c] = 1;
                }
            }
        }
    }
    m
}

/// Relative error used by every finite-difference check; the floor keeps
/// near-zero gradients from inflating the ratio.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// A synthetic `size × size` case as network input: `[3, S, S]` image,
/// target mask, its box and a train-mode prompt set.
pub struct ToySample {
    pub image: boxseg_tensor::Tensor,
    pub gt: Vec<u8>,
    pub bbox: Bbox,
    pub prompts: PromptSet,
}

pub fn toy_sample(seed: u64, size: usize) -> ToySample {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = boxseg_core::harness::synth::gen_synthetic_case_sized(&mut rng, size);
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        data.extend_from_slice(&c.image);
    }
    let image = boxseg_tensor::Tensor::new(vec![3, size, size], data).unwrap();
    let prompts = make_prompts(&c.bbox, &c.image, size, PromptMode::Train, &mut rng);
    ToySample { image, gt: c.gt, bbox: c.bbox, prompts }
}

/// One analytic vs central-difference comparison.
#[derive(Debug)]
pub struct GradProbe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// Dice + BCE + IoU MSE of the toy model in f64, train-mode batch norm.
/// The mask behind the IoU target is held fixed so the loss is smooth in
/// the parameters.
fn toy_loss(
    model: &boxseg_core::model::Model<f64>,
    image: &boxseg_tensor::Tensor<f64>,
    prompt: &boxseg_core::model::Prompt,
    gt: &[u8],
    fixed_pred: &[u8],
    grads: bool,
) -> (f64, std::collections::BTreeMap<String, boxseg_tensor::Tensor<f64>>) {
    use boxseg_core::losses::{iou_loss, mask_loss};
    use boxseg_core::model::Ctx;
    let g = boxseg_tensor::Graph::<f64>::new();
    let cx = Ctx::new(&g, &model.params, true);
    let img = g.constant(image.clone());
    let out = model.forward(&cx, &img, prompt).unwrap();
    let (dice, bce) = mask_loss(&g, &out.mask_logits, gt).unwrap();
    let iou = iou_loss(&g, &out.iou_pred, fixed_pred, gt).unwrap();
    let total = g.add(&g.add(&dice, &bce).unwrap(), &iou).unwrap();
    let v = total.value().data()[0];
    if !grads {
        return (v, Default::default());
    }
    let gr = g.backward(&total).unwrap();
    (v, cx.param_grads(&gr))
}

const JITTER: f64 = 0.05;

/// Checks `per_component` randomly chosen parameter elements in each of the
/// encoder, prompt encoder and decoder of a randomly initialized toy model.
pub fn toy_gradcheck(seed: u64, per_component: usize) -> Vec<GradProbe> {
    use boxseg_core::model::{Model, ModelConfig, Prompt};
    use boxseg_core::prompts::PromptKinds;
    use rand::SeedableRng;
    let mut model: Model<f64> = Model::init(ModelConfig::toy(), seed).unwrap();
    // Probe at a generic point: at init the biases are exactly zero, which
    // parks some channel norms on zero variance, and the small weights push
    // many gradients down to roundoff level.
    let mut jitter = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    for (_, p) in model.params.iter_mut().filter(|(_, p)| p.trainable) {
        for v in p.value.data_mut() {
            *v += jitter.random_range(-JITTER..JITTER);
        }
    }
    let s = model.cfg.img_size;
    let sample = toy_sample(seed, s);
    let image = sample.image.cast::<f64>();
    let prompt = Prompt::from_set(&sample.prompts, PromptKinds::BoxPointsScribble);
    // Any fixed mask will do; a box-shaped one keeps the IoU target non-trivial.
    let fixed: Vec<u8> = (0..s * s)
        .map(|i| u8::from(sample.bbox.contains_point((i % s) as f64 + 0.5, (i / s) as f64 + 0.5)))
        .collect();
    let (_, grads) = toy_loss(&model, &image, &prompt, &sample.gt, &fixed, true);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let h = 1e-4;
    let mut probes = Vec::new();
    for prefix in ["encoder.", "promptenc.", "decoder."] {
        let names: Vec<&String> = grads.keys().filter(|n| n.starts_with(prefix)).collect();
        assert!(!names.is_empty(), "no gradients under {prefix}");
        for _ in 0..per_component {
            let name = names[rng.random_range(0..names.len())].clone();
            let gt = &grads[&name];
            // Elements far below the tensor's largest gradient drown in the
            // finite-difference roundoff; draw among the well-conditioned ones.
            let top = gt.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let live: Vec<usize> = (0..gt.len()).filter(|&i| gt.data()[i].abs() >= 0.1 * top).collect();
            let index = live[rng.random_range(0..live.len())];
            let mut m = model.clone();
            let base = m.params.get(&name).unwrap().value.data()[index];
            let mut at = |d: f64| {
                m.params.get_mut(&name).unwrap().value.data_mut()[index] = base + d;
                toy_loss(&m, &image, &prompt, &sample.gt, &fixed, false).0
            };
            // Fourth-order stencil: layer norms over near-constant channels
            // are strongly curved and bias the plain central difference.
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            probes.push(GradProbe { name, index, analytic: gt.data()[index], numeric });
        }
    }
    probes
}
