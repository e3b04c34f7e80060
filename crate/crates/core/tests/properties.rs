//! Property tests for the invariants each module promises.

use proptest::prelude::*;

use ddvi::autodiff::{adam_step, AdamState, Graph, Tensor};
use ddvi::config::{parse_config, RunConfig};
use ddvi::data::pca_project;
use ddvi::diffusion::{entropy_term, DiffusionProcess, NoiseSchedule, SigmaMode};
use ddvi::metrics::{cluster_scores, knn_accuracy, mmd_squared};
use ddvi::nets::{DecoderHead, MlpDecoder, ParamStore, TimeMlp};
use ddvi::objectives::LossBreakdown;
use ddvi::priors::{sample_prior, KdeDensity, PriorKind, PriorSpec};
use ddvi::rng;
use ddvi::viz::scatter_svg;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d))
}

fn sized_matrix(max_rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows).prop_flat_map(move |n| matrix(n, cols))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_shape_must_match_data(rows in 0usize..6, cols in 0usize..6, extra in 1usize..3) {
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols]).is_ok());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + extra]).is_err());
    }

    #[test]
    fn backward_is_bit_reproducible(x in sized_matrix(5, 3), w in matrix(3, 2)) {
        let run = || {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let h = g.matmul(xv, wv).unwrap();
            let h = g.tanh(h);
            let s = g.logsumexp_rows(h);
            let l = g.mean(s);
            let gr = g.backward(l).unwrap();
            (gr.get_or_zeros(xv).into_data(), gr.get_or_zeros(wv).into_data())
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn adam_with_zero_lr_is_identity(p in matrix(3, 4), g in prop::collection::vec(-10.0f64..10.0, 12), steps in 1usize..5) {
        let mut t = p.clone();
        let mut st = AdamState::new(12, 0.0);
        for _ in 0..steps {
            adam_step(&mut t, &g, &mut st).unwrap();
        }
        prop_assert_eq!(t.data(), p.data());
    }

    #[test]
    fn sigmoid_decoder_outputs_in_unit_interval(z in sized_matrix(6, 2), seed in 0u64..1000) {
        let mut store = ParamStore::new();
        let dec = MlpDecoder::new(&mut store, 2, &[8], 5, DecoderHead::Sigmoid, &mut rng::rng(seed));
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let out = dec.decode(&mut g, &p, zv).unwrap();
        prop_assert_eq!(g.value(out).shape(), &[z.rows(), 5]);
        prop_assert!(g.value(out).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn noise_net_depends_on_timestep(y in matrix(2, 2), seed in 0u64..1000, t in 1usize..4) {
        let mut store = ParamStore::new();
        let net = TimeMlp::new(&mut store, 2, 0, 8, 3, 4, &mut rng::rng(seed));
        let out = |t: usize| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let yv = g.constant(y.clone());
            let c = g.constant(Tensor::zeros(2, 0));
            let o = net.forward(&mut g, &p, yv, c, &[t, t]).unwrap();
            g.value(o).clone()
        };
        let (a, b) = (out(t), out(t + 1));
        prop_assert_eq!(a.shape(), &[2, 2]);
        prop_assert_ne!(a.data(), b.data());
        let b = out(t);
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn kde_log_density_is_finite(pts in sized_matrix(8, 2), q in prop::collection::vec(-50.0f64..50.0, 2)) {
        let kde = KdeDensity::with_default_bandwidths(&pts).unwrap();
        let (lp, grad) = kde.log_density_and_grad(&q);
        prop_assert!(lp.is_finite());
        prop_assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn linear_schedule_invariants(steps in 1usize..60, lo in 1e-5f64..0.05, span in 0.0f64..0.9) {
        let s = NoiseSchedule::linear(steps, lo, lo + span).unwrap();
        prop_assert_eq!(s.bar_alpha(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.bar_alpha(t) < s.bar_alpha(t - 1));
        }
    }

    #[test]
    fn entropy_is_independent_of_encoder_means(steps in 1usize..10, sigma in 0.01f64..2.0, lv in matrix(3, 2)) {
        let sched = NoiseSchedule::linear(steps, 1e-4, 0.2).unwrap();
        let p = DiffusionProcess::new(sched, SigmaMode::Constant(sigma));
        let d = 2.0;
        let expected = steps as f64 * (0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln()) + d * sigma.ln())
            + 0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln())
            + 0.5 * lv.data().iter().sum::<f64>() / 3.0;
        prop_assert!((entropy_term(&p, 2, &lv) - expected).abs() < 1e-9);
    }

    #[test]
    fn breakdown_total_identity(rec in -10.0f64..0.0, reg in -50.0f64..5.0, diff in -5.0f64..0.0, br in 0.0f64..1.0, bd in 0.0f64..2.0) {
        let b = LossBreakdown::new(rec, reg, diff, 0.0, br, bd);
        prop_assert_eq!(b.total, rec + br * reg + bd * diff);
    }

    #[test]
    fn mmd_nonnegative_symmetric_zero_on_self(x in sized_matrix(6, 2), y in sized_matrix(6, 2)) {
        let xy = mmd_squared(&x, &y).unwrap();
        let yx = mmd_squared(&y, &x).unwrap();
        prop_assert!(xy >= -1e-12);
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!(mmd_squared(&x, &x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cluster_scores_relabeling_invariance(
        pairs in prop::collection::vec((0usize..4, 0usize..3), 1..40),
        shift_k in 1usize..7,
        swap in any::<bool>(),
    ) {
        let (assign, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let base = cluster_scores(&assign, &labels).unwrap();
        for v in [base.purity, base.completeness, base.nmi] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let relabeled: Vec<usize> = assign.iter().map(|&k| (k + shift_k) * 3 % 11).collect();
        let r = cluster_scores(&relabeled, &labels).unwrap();
        prop_assert!((r.purity - base.purity).abs() < 1e-12);
        prop_assert!((r.completeness - base.completeness).abs() < 1e-12);
        prop_assert!((r.nmi - base.nmi).abs() < 1e-12);
        let classes: Vec<usize> = labels.iter().map(|&c| if swap { 2 - c } else { c + 5 }).collect();
        let c = cluster_scores(&assign, &classes).unwrap();
        prop_assert!((c.purity - base.purity).abs() < 1e-12);
        prop_assert!((c.nmi - base.nmi).abs() < 1e-12);
    }

    #[test]
    fn knn_invariant_under_exact_isometries(x in sized_matrix(20, 2), labels in prop::collection::vec(0usize..3, 20), k in 1usize..6) {
        prop_assume!(x.rows() >= 2);
        let labels = &labels[..x.rows()];
        let base = knn_accuracy(&x, labels, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&base.accuracy));
        // Quarter-turn rotation and a reflection are exact in floating point.
        let rot = Tensor::matrix(x.rows(), 2, (0..x.rows()).flat_map(|i| [-x.get(i, 1), x.get(i, 0)]).collect());
        let refl = Tensor::matrix(x.rows(), 2, (0..x.rows()).flat_map(|i| [x.get(i, 0), -x.get(i, 1)]).collect());
        prop_assert_eq!(knn_accuracy(&rot, labels, k).unwrap(), base);
        prop_assert_eq!(knn_accuracy(&refl, labels, k).unwrap(), base);
    }

    #[test]
    fn pca_components_uncorrelated(x in sized_matrix(30, 5), k in 1usize..4) {
        prop_assume!(x.rows() > k);
        let p = pca_project(&x, k, 1.0).unwrap();
        let n = p.projected.rows() as f64;
        for a in 0..k {
            for b in 0..a {
                let cov: f64 = (0..p.projected.rows()).map(|i| p.projected.get(i, a) * p.projected.get(i, b)).sum::<f64>() / n;
                prop_assert!(cov.abs() < 1e-8, "cov({a},{b}) = {cov}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>(), n in 1usize..200, kind in 0usize..3) {
        let spec = [PriorSpec::pinwheel(), PriorSpec::swiss_roll(), PriorSpec::square()][kind].clone();
        prop_assert_eq!(sample_prior(&spec, n, seed).unwrap(), sample_prior(&spec, n, seed).unwrap());
    }

    #[test]
    fn scatter_is_well_formed_svg(x in prop::collection::vec(-1e3f64..1e3, 0..40), seed in any::<u64>()) {
        let n = x.len() / 2;
        let pts = Tensor::matrix(n, 2, x[..2 * n].to_vec());
        let labels: Vec<usize> = (0..n).map(|i| (rng::derive_seed(seed, &[i as u64]) % 30) as usize).collect();
        let svg = scatter_svg(&pts, Some(&labels), "t & <p>").unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        prop_assert_eq!(doc.root_element().tag_name().name(), "svg");
        prop_assert_eq!(doc.descendants().filter(|e| e.has_tag_name("circle")).count(), n);
    }

    #[test]
    fn config_dump_round_trips(lr in 1e-6f64..1.0, batch in 1usize..4096, steps in 1usize..200, kind in 0usize..5) {
        let kinds = [PriorKind::Pinwheel, PriorKind::SwissRoll, PriorKind::Square, PriorKind::Gaussian, PriorKind::Mixture];
        let text = format!("train.lr={lr:?}\ntrain.batch={batch}\ndiffusion.steps={steps}\nprior.kind={}\n", kinds[kind]);
        let cfg = parse_config(&text).unwrap();
        prop_assert_eq!(cfg.lr, lr);
        let again = parse_config(&cfg.dump()).unwrap();
        prop_assert_eq!(again.lr, cfg.lr);
        let values = |c: &ddvi::config::RunConfig| -> Vec<String> {
            c.dump().lines().map(|l| l.split("  #").next().unwrap().to_string()).collect()
        };
        prop_assert_eq!(values(&again), values(&cfg));
    }
}

#[test]
fn gaussian_prior_moments() {
    let n = 100_000;
    let (z, _) = sample_prior(&PriorSpec::gaussian(2), n, 11).unwrap();
    let nf = n as f64;
    for c in 0..2 {
        let mean: f64 = (0..n).map(|i| z.get(i, c)).sum::<f64>() / nf;
        let var: f64 = (0..n).map(|i| (z.get(i, c) - mean).powi(2)).sum::<f64>() / nf;
        assert!(mean.abs() < 3.0 / nf.sqrt(), "mean {mean}");
        // Var of the sample variance of a standard normal is 2 / n.
        assert!((var - 1.0).abs() < 3.0 * (2.0 / nf).sqrt(), "var {var}");
    }
    let cov: f64 = (0..n).map(|i| z.get(i, 0) * z.get(i, 1)).sum::<f64>() / nf;
    assert!(cov.abs() < 3.0 / nf.sqrt(), "cov {cov}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let err = parse_config("train.lrr=0.01").unwrap_err().to_string();
    assert!(err.contains("train.lrr"), "{err}");
    assert_eq!(RunConfig::default().steps, 20);
}
