use rand::Rng;
use ulrseg::{ImageTensor, LabelMap};

pub const IGNORE: u8 = 255;

pub fn random_map(r: &mut impl Rng, h: usize, w: usize, c: u8) -> LabelMap {
    let data = (0..h * w).map(|_| r.gen_range(0..c)).collect();
    LabelMap::new(h, w, data).unwrap()
}

/// Blocky maps give regions larger than single pixels.
pub fn blocky_map(r: &mut impl Rng, side: usize, c: u8) -> LabelMap {
    let cells: Vec<u8> = (0..16).map(|_| r.gen_range(0..c)).collect();
    LabelMap::from_fn(side, side, |y, x| cells[(y * 4 / side) * 4 + x * 4 / side])
}

pub fn random_image(r: &mut impl Rng, side: usize) -> ImageTensor {
    let data: Vec<f64> = (0..3 * side * side).map(|_| r.gen::<f64>()).collect();
    ImageTensor::from_fn(3, side, side, |c, y, x| data[(c * side + y) * side + x])
}

pub fn oracle_miou(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let mut ious = Vec::new();
    for k in 0..=254u8 {
        let (mut inter, mut union) = (0, 0);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            inter += usize::from(p == k && g == k);
            union += usize::from(p == k || g == k);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn oracle_ari(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let (p, g) = (pred.data(), gt.data());
    let n = p.len();
    let (mut both, mut same_p, mut same_g, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sp = p[i] == p[j];
            let sg = g[i] == g[j];
            both += f64::from(u8::from(sp && sg));
            same_p += f64::from(u8::from(sp));
            same_g += f64::from(u8::from(sg));
            pairs += 1.0;
        }
    }
    let expected = same_p * same_g / pairs;
    let max = 0.5 * (same_p + same_g);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (both - expected) / (max - expected)
}

/// Union-find components; a different algorithm from the breadth-first search under test.
pub fn components(map: &LabelMap) -> Vec<usize> {
    let (h, w) = (map.height(), map.width());
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)]
                .into_iter()
                .flatten()
            {
                if map.data()[i] == map.data()[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    (0..h * w).map(|i| find(&mut parent, i)).collect()
}

pub fn oracle_covering(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let (cg, cp) = (components(gt), components(pred));
    let n = cg.len() as f64;
    let mut roots: Vec<usize> = cg.clone();
    roots.sort_unstable();
    roots.dedup();
    let mut proots: Vec<usize> = cp.clone();
    proots.sort_unstable();
    proots.dedup();
    let mut total = 0.0;
    for &rg in &roots {
        let size = cg.iter().filter(|&&c| c == rg).count() as f64;
        let best = proots
            .iter()
            .map(|&rp| {
                let inter = (0..cg.len())
                    .filter(|&i| cg[i] == rg && cp[i] == rp)
                    .count() as f64;
                let union = (0..cg.len())
                    .filter(|&i| cg[i] == rg || cp[i] == rp)
                    .count() as f64;
                inter / union
            })
            .fold(0.0, f64::max);
        total += size / n * best;
    }
    total
}

pub fn oracle_boundary(map: &LabelMap) -> Vec<(usize, usize)> {
    let (h, w) = (map.height() as isize, map.width() as isize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = map.get(y as usize, x as usize);
            let edge = [(0, 1), (1, 0), (0, -1), (-1, 0)].iter().any(|(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                yy >= 0 && xx >= 0 && yy < h && xx < w && map.get(yy as usize, xx as usize) != v
            });
            if edge {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

pub fn oracle_bf(pred: &LabelMap, gt: &LabelMap, tol: f64) -> f64 {
    let (bp, bg) = (oracle_boundary(pred), oracle_boundary(gt));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let near = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter().any(|b| {
            let d = ((a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).sqrt();
            d <= tol
        })
    };
    let p = bp.iter().filter(|&&a| near(a, &bg)).count() as f64 / bp.len() as f64;
    let r = bg.iter().filter(|&&a| near(a, &bp)).count() as f64 / bg.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn oracle_psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let d = a.tensor().data();
    let e = b.tensor().data();
    let mse: f64 = d.iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Explicit 2-D Gaussian window evaluated at every fully contained position.
pub fn oracle_ssim(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let n = 11;
    let sigma = 1.5f64;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * n + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=h - n {
            for x in 0..=w - n {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        mx += win[i * n + j] * a.at(ch, y + i, x + j);
                        my += win[i * n + j] * b.at(ch, y + i, x + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let (p, q) = (a.at(ch, y + i, x + j) - mx, b.at(ch, y + i, x + j) - my);
                        vx += win[i * n + j] * p * p;
                        vy += win[i * n + j] * q * q;
                        cov += win[i * n + j] * p * q;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    total / 3.0
}
