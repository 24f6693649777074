//! Overlap and surface metrics on binary masks.

/// Default surface tolerance in pixels.
pub const DEFAULT_NSD_TOL: f64 = 2.0;

/// Dice similarity `2|A∩B| / (|A| + |B|)`; 1 when both are empty.
pub fn dsc(pred: &[u8], gt: &[u8]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dsc: mask sizes differ");
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        a += p as u64;
        b += g as u64;
        both += (p && g) as u64;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Foreground pixels with a background 4-neighbour; outside the image
/// counts as background.
pub fn boundary(mask: &[u8], w: usize, h: usize) -> Vec<bool> {
    let fg = |c: isize, r: isize| {
        c >= 0 && r >= 0 && (c as usize) < w && (r as usize) < h && mask[r as usize * w + c as usize] != 0
    };
    let mut out = vec![false; w * h];
    for r in 0..h as isize {
        for c in 0..w as isize {
            if fg(c, r) && !(fg(c - 1, r) && fg(c + 1, r) && fg(c, r - 1) && fg(c, r + 1)) {
                out[r as usize * w + c as usize] = true;
            }
        }
    }
    out
}

/// Lower envelope of parabolas `(q - v)² + f[v]` over the finite entries of
/// `f`, evaluated at every `q`. Entries stay infinite when `f` has none.
fn envelope_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            let Some(&p) = v.last() else { break };
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.clear();
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest seed.
pub fn squared_edt(seeds: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut cols = vec![f64::INFINITY; w * h];
    let mut f = vec![0.0; h];
    let mut o = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            f[r] = if seeds[r * w + c] { 0.0 } else { f64::INFINITY };
        }
        envelope_1d(&f, &mut o);
        for r in 0..h {
            cols[r * w + c] = o[r];
        }
    }
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        envelope_1d(&cols[r * w..(r + 1) * w], &mut out[r * w..(r + 1) * w]);
    }
    out
}

/// Normalized surface Dice at tolerance `tol` pixels.
pub fn nsd(pred: &[u8], gt: &[u8], w: usize, h: usize, tol: f64) -> f64 {
    assert_eq!(pred.len(), w * h, "nsd: pred size");
    assert_eq!(gt.len(), w * h, "nsd: gt size");
    let (ea, eb) = (pred.iter().all(|&v| v == 0), gt.iter().all(|&v| v == 0));
    match (ea, eb) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (ba, bb) = (boundary(pred, w, h), boundary(gt, w, h));
    let (da, db) = (squared_edt(&ba, w, h), squared_edt(&bb, w, h));
    let tol2 = tol * tol;
    let (mut na, mut nb, mut hit) = (0usize, 0usize, 0usize);
    for i in 0..w * h {
        if ba[i] {
            na += 1;
            hit += (db[i] <= tol2) as usize;
        }
        if bb[i] {
            nb += 1;
            hit += (da[i] <= tol2) as usize;
        }
    }
    hit as f64 / (na + nb) as f64
}
