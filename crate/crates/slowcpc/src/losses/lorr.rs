//! Left-or-right regularizer. Each frame pays the smaller of the feature
//! variances over a left-anchored and a right-anchored window that both
//! include the frame itself, so a frame only needs to be similar to ONE
//! side — the loss stays small at segment boundaries while still pushing
//! features toward piecewise-constant trajectories.

use ndarray::Array2;

/// Summed per-dimension population variance over frames
/// `z[start..start + w]`.
fn window_cost(z: &Array2<f64>, start: usize, w: usize) -> f64 {
    let d = z.ncols();
    let inv_w = 1.0 / w as f64;
    let mut cost = 0.0;
    for c in 0..d {
        let mut mean = 0.0;
        for t in start..start + w {
            mean += z[[t, c]];
        }
        mean *= inv_w;
        let mut var = 0.0;
        for t in start..start + w {
            let r = z[[t, c]] - mean;
            var += r * r;
        }
        cost += var * inv_w;
    }
    cost
}

/// Which windows exist for frame `i` of an `L`-frame sequence.
fn windows_of(i: usize, l: usize, w: usize) -> (Option<usize>, Option<usize>) {
    let left = (i + 1 >= w).then(|| i + 1 - w); // start of {i-w+1 .. i}
    let right = (i + w <= l).then_some(i); // start of {i .. i+w-1}
    (left, right)
}

/// Mean over frames of min(left-window cost, right-window cost), with
/// one-sided fallback at the edges and zero when the sequence is shorter
/// than the window.
pub fn lorr_loss(z: &Array2<f64>, w: usize) -> f64 {
    assert!(w >= 2, "window must cover at least two frames");
    let l = z.nrows();
    if l == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..l {
        let (left, right) = windows_of(i, l, w);
        total += match (left, right) {
            (Some(a), Some(b)) => window_cost(z, a, w).min(window_cost(z, b, w)),
            (Some(a), None) | (None, Some(a)) => window_cost(z, a, w),
            (None, None) => 0.0,
        };
    }
    total / l as f64
}

/// Loss plus gradient. Each frame's chosen window (ties pick the left
/// one) receives the variance gradient `(2/w)(z - mean)` scaled by `1/L`.
pub fn lorr_loss_grad(z: &Array2<f64>, w: usize) -> (f64, Array2<f64>) {
    assert!(w >= 2, "window must cover at least two frames");
    let (l, d) = z.dim();
    let mut dz = Array2::<f64>::zeros((l, d));
    if l == 0 {
        return (0.0, dz);
    }
    let inv_l = 1.0 / l as f64;
    let inv_w = 1.0 / w as f64;
    let mut total = 0.0;

    let mut add_window_grad = |dz: &mut Array2<f64>, start: usize| {
        for c in 0..d {
            let mut mean = 0.0;
            for t in start..start + w {
                mean += z[[t, c]];
            }
            mean *= inv_w;
            let scale = 2.0 * inv_w * inv_l;
            for t in start..start + w {
                dz[[t, c]] += scale * (z[[t, c]] - mean);
            }
        }
    };

    for i in 0..l {
        let (left, right) = windows_of(i, l, w);
        match (left, right) {
            (Some(a), Some(b)) => {
                let (ca, cb) = (window_cost(z, a, w), window_cost(z, b, w));
                if ca <= cb {
                    total += ca;
                    add_window_grad(&mut dz, a);
                } else {
                    total += cb;
                    add_window_grad(&mut dz, b);
                }
            }
            (Some(a), None) | (None, Some(a)) => {
                total += window_cost(z, a, w);
                add_window_grad(&mut dz, a);
            }
            (None, None) => {}
        }
    }
    (total * inv_l, dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn column(values: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
    }

    #[test]
    fn constant_sequence_is_free() {
        let z = Array2::from_elem((7, 3), 0.8);
        assert_eq!(lorr_loss(&z, 2), 0.0);
        assert_eq!(lorr_loss(&z, 3), 0.0);
    }

    #[test]
    fn step_sequence_with_long_runs_is_free() {
        // every frame has at least one constant-side window
        assert_eq!(lorr_loss(&column(&[1.0, 1.0, 3.0, 3.0]), 2), 0.0);
    }

    #[test]
    fn alternating_sequence_fixture() {
        // every frame's both windows are {0,2}: population variance 1
        let loss = lorr_loss(&column(&[0.0, 2.0, 0.0, 2.0]), 2);
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shorter_than_window_is_zero() {
        assert_eq!(lorr_loss(&column(&[5.0]), 2), 0.0);
        assert_eq!(lorr_loss(&column(&[5.0, 7.0]), 3), 0.0);
    }

    #[test]
    fn piecewise_constant_runs_are_free() {
        // With w = 2 any run of length >= 2 is free; for larger windows a
        // middle frame of an interior run needs one window fully inside
        // the run, which takes runs of length >= 2w - 2.
        let mut rng = derive_rng(41, &[]);
        for _ in 0..20 {
            let w = rng.random_range(2..5usize);
            let min_run = w.max(2 * w - 2);
            let runs = rng.random_range(1..4usize);
            let d = rng.random_range(1..3usize);
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for _ in 0..runs {
                let level: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 4.0).collect();
                let run_len = rng.random_range(min_run..min_run + w);
                for _ in 0..run_len {
                    rows.push(level.clone());
                }
            }
            let z = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]);
            assert!(lorr_loss(&z, w) < 1e-18, "w={w} rows={}", rows.len());
        }
    }

    #[test]
    fn invariant_under_frame_reversal() {
        let mut rng = derive_rng(42, &[]);
        for _ in 0..20 {
            let l = rng.random_range(1..9usize);
            let d = rng.random_range(1..4usize);
            let w = rng.random_range(2..5usize);
            let z = Array2::from_shape_fn((l, d), |_| rng.random::<f64>());
            let mut rev = Array2::zeros((l, d));
            for i in 0..l {
                rev.row_mut(i).assign(&z.row(l - 1 - i));
            }
            let (a, b) = (lorr_loss(&z, w), lorr_loss(&rev, w));
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn non_negative() {
        let mut rng = derive_rng(43, &[]);
        for _ in 0..50 {
            let l = rng.random_range(1..10usize);
            let z = Array2::from_shape_fn((l, 2), |_| rng.random::<f64>() - 0.5);
            assert!(lorr_loss(&z, 2) >= 0.0);
        }
    }

    #[test]
    fn boundary_frame_picks_cheap_side() {
        // boundary at frame 2: left window of frame 2 is {1,3} (costly),
        // right window {3,3} is free; the min keeps the loss at zero
        let z = array![[1.0], [1.0], [3.0], [3.0], [3.0]];
        assert_eq!(lorr_loss(&z, 2), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = derive_rng(44, &[]);
        for trial in 0..20 {
            let l = rng.random_range(1..10usize);
            let d = rng.random_range(1..4usize);
            let w = rng.random_range(2..5usize);
            let mut z = Array2::from_shape_fn((l, d), |_| rng.random::<f64>() * 2.0 - 1.0);
            let (_, dz) = lorr_loss_grad(&z, w);
            let h = 1e-5;
            for i in 0..l {
                for c in 0..d {
                    let orig = z[[i, c]];
                    z[[i, c]] = orig + h;
                    let up = lorr_loss(&z, w);
                    z[[i, c]] = orig - h;
                    let dn = lorr_loss(&z, w);
                    z[[i, c]] = orig;
                    let num = (up - dn) / (2.0 * h);
                    let ana = dz[[i, c]];
                    let denom = num.abs().max(ana.abs());
                    if denom > 1e-10 {
                        assert!(
                            (num - ana).abs() / denom < 1e-4,
                            "trial {trial} ({l}x{d} w={w}) ({i},{c}): {ana} vs {num}"
                        );
                    }
                }
            }
        }
    }
}
