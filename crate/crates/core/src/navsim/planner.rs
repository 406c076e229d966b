//! Image-space planning on segmentation maps.

use crate::types::LabelMap;

/// Share of the image the target must strictly exceed.
pub const SUCCESS_FRACTION: f64 = 0.40;

/// Floor spans `[start, end]` of one row.
fn spans(seg: &LabelMap, row: usize, floor: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for x in 0..seg.width() {
        match (seg.get(row, x) == floor, start) {
            (true, None) => start = Some(x),
            (false, Some(s)) => {
                out.push((s, x - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, seg.width() - 1));
    }
    out
}

/// Midpoints of the floor span on rows `H−1, H−1−interval, …`, near to far.
///
/// Where a row has several spans, the one whose midpoint is closest to the
/// previous waypoint (the image centre for the first) is followed. Rows
/// without floor are skipped.
pub fn plan_floor_waypoints(
    seg: &LabelMap,
    floor_class: u8,
    interval: usize,
) -> Vec<(usize, usize)> {
    let interval = interval.max(1);
    let mut out = Vec::new();
    if seg.is_empty() {
        return out;
    }
    let mut anchor = seg.width() / 2;
    let mut row = seg.height() - 1;
    loop {
        let best = spans(seg, row, floor_class)
            .into_iter()
            .map(|(s, e)| (s + e) / 2)
            .min_by_key(|&m| (m.abs_diff(anchor), m));
        if let Some(mid) = best {
            out.push((row, mid));
            anchor = mid;
        }
        if row < interval {
            break;
        }
        row -= interval;
    }
    out
}

/// Least-squares line `x = a + b·y`.
fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mx = points.iter().map(|p| p.1).sum::<f64>() / n;
    let syy: f64 = points.iter().map(|p| (p.0 - my).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - my) * (p.1 - mx)).sum();
    let b = if syy == 0.0 { 0.0 } else { sxy / syy };
    (mx - b * my, b)
}

/// Floor pixels lying more than `dev_threshold` pixels outside the fitted
/// left or right floor boundary, one representative per 4-connected cluster.
///
/// The representative is the cluster pixel nearest its centroid; clusters are
/// ordered by their first pixel in raster order.
pub fn detect_branch_points(
    seg: &LabelMap,
    floor_class: u8,
    dev_threshold: f64,
) -> Vec<(usize, usize)> {
    let (h, w) = (seg.height(), seg.width());
    let mut left = Vec::new();
    let mut right = Vec::new();
    for y in 0..h {
        let xs: Vec<usize> = (0..w).filter(|&x| seg.get(y, x) == floor_class).collect();
        if let (Some(&l), Some(&r)) = (xs.first(), xs.last()) {
            left.push((y as f64, l as f64));
            right.push((y as f64, r as f64));
        }
    }
    if left.len() < 2 {
        return Vec::new();
    }
    let (la, lb) = fit_line(&left);
    let (ra, rb) = fit_line(&right);
    let mut flagged = vec![false; h * w];
    for y in 0..h {
        let (lo, hi) = (la + lb * y as f64, ra + rb * y as f64);
        for x in 0..w {
            let xf = x as f64;
            if seg.get(y, x) == floor_class && (lo - xf > dev_threshold || xf - hi > dev_threshold)
            {
                flagged[y * w + x] = true;
            }
        }
    }
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !flagged[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut members = Vec::new();
        while let Some(i) = stack.pop() {
            members.push(i);
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if flagged[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        let n = members.len() as f64;
        let cy = members.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
        let cx = members.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
        let rep = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let d = |i: usize| ((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2);
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            })
            .expect("cluster is non-empty");
        out.push((rep / w, rep % w));
    }
    out
}

/// True iff the target covers strictly more than 40% of the pixels.
pub fn check_success(seg: &LabelMap, target_class: u8) -> bool {
    !seg.is_empty() && seg.count(target_class) as f64 > SUCCESS_FRACTION * seg.len() as f64
}
