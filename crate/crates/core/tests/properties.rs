use proptest::prelude::*;
use svddip::ct::{CtOperator, ParallelGeometry};
use svddip::svd::{factorize_conv, svd_decompose, Matrix, TruncationPolicy};
use svddip::tensor::Tensor;
use svddip::training::{aggregate, summarize, IterationRecord, RunMetrics};

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Matrix {
    Matrix::new(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

fn gram_error(m: &Matrix, rows_orthonormal: bool) -> f64 {
    let g = if rows_orthonormal { m.matmul(&m.transpose()).unwrap() } else { m.transpose().matmul(m).unwrap() };
    g.max_abs_diff(&Matrix::identity(g.rows()))
}

fn records(psnr: &[f64]) -> RunMetrics {
    let mut m = RunMetrics::default();
    for (i, &p) in psnr.iter().enumerate() {
        m.push(IterationRecord {
            iteration: i,
            objective: 1.0,
            data_term: 1.0,
            tv: 1.0,
            psnr: Some(p),
        })
        .unwrap();
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_with_orthonormal_factors(
        rows in 1usize..8,
        cols in 1usize..12,
        vals in prop::collection::vec(-3.0f64..3.0, 96),
    ) {
        let m = matrix(rows, cols, &vals);
        let f = svd_decompose(&m).unwrap();
        prop_assert_eq!(f.rank(), rows.min(cols));
        prop_assert!(f.reconstruct().max_abs_diff(&m) < 1e-10);
        prop_assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.s.iter().all(|&s| s >= 0.0));
        // Columns of U and rows of V are orthonormal wherever the singular value is nonzero.
        if f.s.last().copied().unwrap_or(0.0) > 1e-8 {
            prop_assert!(gram_error(&f.u, false) < 1e-10);
            prop_assert!(gram_error(&f.v, true) < 1e-10);
        }
    }

    #[test]
    fn factorized_conv_matches_plain_conv(
        c_out in 1usize..5,
        c_in in 1usize..5,
        k_idx in 0usize..3,
        stride in 1usize..3,
        vals in prop::collection::vec(-2.0f64..2.0, 4 * 4 * 25 + 4 + 4 * 64),
    ) {
        let k = [1, 3, 5][k_idx];
        let wn = c_out * c_in * k * k;
        let w = Tensor::new([c_out, c_in, k, k], vals[..wn].to_vec()).unwrap();
        let b = Tensor::new([c_out], vals[wn..wn + c_out].to_vec()).unwrap();
        let x = Tensor::new([c_in, 8, 8], vals[wn + c_out..wn + c_out + c_in * 64].to_vec()).unwrap();
        let f = factorize_conv::<f64>(&w, TruncationPolicy::None).unwrap();
        let a = f.conv2d(&x, Some(&b), stride, k / 2).unwrap();
        let d = x.conv2d(&w, Some(&b), stride, k / 2).unwrap();
        prop_assert!(a.data().iter().zip(d.data()).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn truncation_keeps_a_monotone_nonempty_prefix(
        mut s in prop::collection::vec(0.0f64..10.0, 1..40),
        p in 0.01f64..1.0,
        q in 0.01f64..1.0,
        t in 0.0f64..0.99,
    ) {
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assume!(s[0] > 0.0);
        let r = s.len();
        let kp = TruncationPolicy::RankFraction(p).keep_count(&s).unwrap();
        let kq = TruncationPolicy::RankFraction(q).keep_count(&s).unwrap();
        prop_assert!(kp >= 1 && kp <= r);
        prop_assert_eq!(kp, ((p * r as f64) - 1e-9).ceil().max(1.0) as usize);
        prop_assert!(p > q || kp <= kq);
        let kt = TruncationPolicy::ThresholdFraction(t).keep_count(&s).unwrap();
        prop_assert!(s[..kt].iter().all(|&v| v >= t * s[0]));
        prop_assert!(s[kt..].iter().all(|&v| v < t * s[0]));
        prop_assert_eq!(TruncationPolicy::None.keep_count(&s).unwrap(), r);
    }

    #[test]
    fn projector_and_backprojector_are_adjoint(
        angles in 1usize..12,
        n in 2usize..12,
        extra in 0usize..6,
        pixel in 0.1f64..2.0,
        vals in prop::collection::vec(-1.0f64..1.0, 144 + 12 * 24),
    ) {
        let dets = (n as f64 * std::f64::consts::SQRT_2).ceil() as usize + extra;
        let op = CtOperator::parallel(ParallelGeometry::uniform(angles, dets, n).unwrap())
            .unwrap()
            .with_pixel_size(pixel)
            .unwrap();
        let x = Tensor::new([n, n], vals[..n * n].to_vec()).unwrap();
        let y = Tensor::new([angles, dets], vals[144..144 + angles * dets].to_vec()).unwrap();
        let ax = op.forward(&x).unwrap();
        let aty = op.adjoint(&y).unwrap();
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn summary_agrees_with_records(psnr in prop::collection::vec(0.0f64..50.0, 1..60)) {
        let s = summarize(&records(&psnr)).unwrap();
        let max = psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(s.max_psnr, max);
        prop_assert_eq!(psnr[s.max_iteration], max);
        prop_assert!(psnr[..s.max_iteration].iter().all(|&p| p < max));
        prop_assert_eq!(s.final_psnr, *psnr.last().unwrap());
        prop_assert_eq!(s.init_psnr, psnr[0]);
        prop_assert!(s.max_minus_final() >= 0.0);
        let csv = records(&psnr).to_csv();
        prop_assert_eq!(RunMetrics::from_csv(&csv).unwrap(), records(&psnr));
    }

    #[test]
    fn aggregate_of_copies_has_zero_spread(psnr in prop::collection::vec(0.0f64..50.0, 1..30), copies in 1usize..5) {
        let s = summarize(&records(&psnr)).unwrap();
        let agg = aggregate(&vec![s; copies]).unwrap();
        prop_assert_eq!(agg.runs, copies);
        prop_assert!(agg.sd.iter().all(|&v| v.abs() < 1e-9));
        prop_assert!((agg.mean[0] - s.final_psnr).abs() < 1e-9);
        prop_assert!((agg.mean[1] - s.max_psnr).abs() < 1e-9);
    }
}
