use trajdiff_core::networks::{denoiser, encoder, scorer, ArchConfig, Dropout, Model};
use trajdiff_tensor::{gradient_check, Array, GradCheckOptions, ParameterStore};

fn tiny(lanes: Option<usize>) -> ArchConfig {
    ArchConfig {
        t_p: 4,
        t_f: 3,
        d_model: 8,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.1,
        d_c: 6,
        encoder_layers: 1,
        lane_dim: lanes,
        denoiser_layers: 2,
        scorer_heads: 2,
        scorer_d_head: 3,
        scorer_d: 5,
        scorer_mlp: 7,
    }
}

fn wave(shape: &[usize], seed: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|i| ((i as f64 + 1.0) * seed).sin()).collect()).unwrap()
}

fn rows(a: &Array, width: usize) -> Vec<Vec<f64>> {
    a.data().chunks_exact(width).map(<[f64]>::to_vec).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn encoder_shapes_symmetry_and_permutation() {
    let arch = tiny(None);
    let model = Model::new(arch.clone(), 1).unwrap();
    let one = model.encode(&wave(&[1, 1, 4, 2], 0.3), None).unwrap();
    assert_eq!(one.shape(), &[1, 1, 6]);
    assert!(one.all_finite());

    let h = wave(&[1, 3, 4, 2], 0.7);
    let c = rows(&model.encode(&h, None).unwrap(), 6);
    // agents reordered as (2, 0, 1)
    let hr = rows(&h, 8);
    let perm = [2usize, 0, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| hr[i].clone()).collect();
    let cp = rows(&model.encode(&Array::new(vec![1, 3, 4, 2], permuted).unwrap(), None).unwrap(), 6);
    for (k, &i) in perm.iter().enumerate() {
        assert!(close(&cp[k], &c[i], 1e-9));
    }

    let dup: Vec<f64> = [0usize, 1, 0].iter().flat_map(|&i| hr[i].clone()).collect();
    let cd = rows(&model.encode(&Array::new(vec![1, 3, 4, 2], dup).unwrap(), None).unwrap(), 6);
    assert!(close(&cd[0], &cd[2], 0.0));

    assert!(model.encode(&wave(&[1, 2, 5, 2], 0.1), None).is_err());
}

#[test]
fn encoder_uses_lanes_when_configured() {
    let model = Model::new(tiny(Some(3)), 2).unwrap();
    let h = wave(&[1, 2, 4, 2], 0.4);
    let a = model.encode(&h, Some(&wave(&[1, 5, 3], 0.9))).unwrap();
    let b = model.encode(&h, Some(&wave(&[1, 5, 3], 1.7))).unwrap();
    let none = model.encode(&h, None).unwrap();
    assert_eq!(a.shape(), &[1, 2, 6]);
    assert!(a.max_abs_diff(&b) > 1e-6);
    assert!(a.max_abs_diff(&none) > 1e-6);
    assert!(model.encode(&h, Some(&wave(&[1, 5, 4], 0.9))).is_err());
}

#[test]
fn denoiser_shape_and_step_dependence() {
    let model = Model::new(tiny(None), 3).unwrap();
    let y = wave(&[2, 3, 2], 0.5);
    let ctx = wave(&[2, 6], 0.2);
    let e1 = model.denoise(&y, &[1, 1], &ctx).unwrap();
    let eh = model.denoise(&y, &[200, 200], &ctx).unwrap();
    assert_eq!(e1.shape(), y.shape());
    assert!(e1.max_abs_diff(&eh) > 1e-6);
    assert_eq!(model.denoise(&y, &[1, 1], &ctx).unwrap(), e1);
    assert!(model.denoise(&y, &[1], &ctx).is_err());
    assert!(model.denoise(&wave(&[2, 4, 2], 0.5), &[1, 1], &ctx).is_err());
}

#[test]
fn scorer_symmetries() {
    let model = Model::new(tiny(None), 4).unwrap();
    let ctx = wave(&[1, 6], 0.3);
    let single = model.score(&wave(&[1, 1, 6], 0.8), &ctx).unwrap();
    assert_eq!(single.shape(), &[1, 1]);
    let m = single.data()[0];
    let p = (m - m).exp() / (m - m).exp();
    assert_eq!(p, 1.0);

    let c = wave(&[1, 5, 6], 1.1);
    let s = model.score(&c, &ctx).unwrap();
    let cr = rows(&c, 6);
    let perm = [3usize, 0, 4, 2, 1];
    let permuted: Vec<f64> = perm.iter().flat_map(|&i| cr[i].clone()).collect();
    let sp = model.score(&Array::new(vec![1, 5, 6], permuted).unwrap(), &ctx).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert!((sp.data()[k] - s.data()[i]).abs() < 1e-9);
    }

    let twins: Vec<f64> = [0usize, 1, 0].iter().flat_map(|&i| cr[i].clone()).collect();
    let st = model.score(&Array::new(vec![1, 3, 6], twins).unwrap(), &ctx).unwrap();
    assert!((st.data()[0] - st.data()[2]).abs() < 1e-9);

    assert!(model.score(&wave(&[1, 2, 5], 0.1), &ctx).is_err());
}

fn check(store: &ParameterStore, f: impl Fn(&mut trajdiff_tensor::Tape, &trajdiff_tensor::Bound) -> trajdiff_tensor::Result<trajdiff_tensor::Var>) {
    let report = gradient_check(store, f, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.checked > 100);
}

#[test]
fn encoder_denoiser_gradients() {
    for lanes in [None, Some(3)] {
        let arch = tiny(lanes);
        let model = Model::new(arch.clone(), 5).unwrap();
        let hist = wave(&[2, 3, 4, 2], 0.37);
        let lane = wave(&[2, 2, 3], 0.61);
        let y = wave(&[4, 3, 2], 0.29);
        let eps = wave(&[4, 3, 2], 0.83);
        check(&model.stage1, |t, p| {
            let h = t.constant(hist.clone());
            let l = lanes.map(|_| t.constant(lane.clone()));
            let mut drop = Dropout::new(0.1, 11);
            let c = encoder::encode(t, p, &arch, h, l, &mut drop).map_err(to_tensor)?;
            let c = t.reshape(c, vec![6, 6])?;
            let c = t.gather_rows(c, &[0, 2, 3, 5])?;
            let yv = t.constant(y.clone());
            let out = denoiser::denoise(t, p, &arch, yv, &[1, 50, 120, 200], c, &mut drop).map_err(to_tensor)?;
            let e = t.constant(eps.clone());
            t.mse(out, e)
        });
    }
}

#[test]
fn scorer_gradients() {
    let arch = tiny(None);
    let model = Model::new(arch.clone(), 6).unwrap();
    let cands = wave(&[2, 4, 6], 0.47);
    let ctx = wave(&[2, 6], 0.91);
    let raw = wave(&[2, 4], 1.3);
    let targets = Array::new(
        vec![2, 4],
        raw.data()
            .chunks_exact(4)
            .flat_map(|r| {
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                r.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
            })
            .collect(),
    )
    .unwrap();
    check(&model.scorer, |t, p| {
        let c = t.constant(cands.clone());
        let x = t.constant(ctx.clone());
        let mut drop = Dropout::new(0.1, 4);
        let s = scorer::score(t, p, &arch, c, x, &mut drop).map_err(to_tensor)?;
        t.cross_entropy_soft(s, &targets)
    });
}

fn to_tensor(e: trajdiff_core::Error) -> trajdiff_tensor::TensorError {
    match e {
        trajdiff_core::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}
