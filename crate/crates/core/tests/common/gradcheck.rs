//! Finite-difference scenarios shared by the gradient and acceptance tests.

use bqe_core::attention::{Aggregation, KvAxis, NaBlock, Neighborhood, Tcca, TccaConfig};
use bqe_core::autograd::{Graph, Var};
use bqe_core::model::{
    bqe_loss_and_grad, bqe_loss_value, prepare_window, qe_loss_and_grad, qe_loss_value, BqeParams, ModelConfig, QeParams, QualityVector,
};
use bqe_core::neighborhood::knn;
use bqe_core::objectives::{bqe_loss, qe_loss};
use bqe_core::params::{Bound, ParamStore};
use bqe_core::tensor::Matrix;
use bqe_core::TemporalWindow;

use super::*;

pub const MAX_REL: f64 = 1e-4;
/// Tolerance for the closed-form objectives, which have no kinks.
pub const OBJECTIVE_REL: f64 = 1e-6;
const N: usize = 32;

fn perturb(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for v in store.values_mut() {
        let noise = random_matrix(v.rows(), v.cols(), scale, &mut r);
        v.add_assign(&noise);
    }
}

/// Loss on the tape, `mean(out ⊙ c)` with fixed random `c`, so every
/// output coordinate carries a distinct gradient.
fn probe(g: &mut Graph, out: Var, weights: &Matrix) -> Var {
    let c = g.constant(weights.clone());
    let prod = g.mul(out, c);
    g.mean_all(prod)
}

pub fn qe_loss_report() -> FdReport {
    let mut r = rng(3);
    let frame = random_frame(N, 1, 0, &mut r);
    let window = TemporalWindow::new(vec![frame], 0).unwrap();
    let config = ModelConfig {
        radius: 0,
        ..ModelConfig::toy()
    };
    let prepared = prepare_window(&window, &config).unwrap();
    let qe = QeParams::new(&config).unwrap();
    let label = [0.2, 0.5, 0.3];
    let (_, grads) = qe_loss_and_grad(&qe, &prepared, &label);
    fd_check(qe.store.values(), &grads, &all_coords(qe.store.values()), MAX_REL, |vals| {
        let mut q = qe.clone();
        q.store.values_mut().clone_from_slice(vals);
        qe_loss_value(&q, &prepared, &label)
    })
}

pub fn na_report(pe: bool) -> FdReport {
    let seed = 11;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let block = NaBlock::new(&mut store, "na", 4, 6, Aggregation::Neighborhood, pe, &mut r);
    perturb(&mut store, 0.2, seed + 1);
    let geometry: Vec<Vec<f64>> = random_geometry(N, 8, &mut r).iter().map(|v| v.map(f64::from).to_vec()).collect();
    let geo = Matrix::from_rows(&geometry);
    let index = knn(&geo, &geo, 6).unwrap();
    let nbh = Neighborhood::from_index(&index, N).unwrap();
    let x = random_matrix(N, 4, 1.0, &mut r);
    let c = random_matrix(N, 6, 1.0, &mut r);
    let loss = |vals: &[Matrix]| -> (f64, Vec<Matrix>) {
        let mut s = store.clone();
        s.values_mut().clone_from_slice(&vals[1..]);
        let mut g = Graph::new();
        let xv = g.param(vals[0].clone());
        let mut p = Bound::trainable(&s);
        let out = block.forward(&mut g, &mut p, xv, &nbh);
        let l = probe(&mut g, out.features, &c);
        let value = g.value(l).get(0, 0);
        let grads = g.backward(l);
        let mut all = vec![grads.get(xv).unwrap().clone()];
        all.extend(p.grads(&grads));
        (value, all)
    };
    let mut values = vec![x];
    values.extend(store.values().iter().cloned());
    let (_, analytic) = loss(&values);
    fd_check(&values, &analytic, &all_coords(&values), MAX_REL, |v| loss(v).0)
}

pub fn tcca_report(axis: KvAxis) -> FdReport {
    let mut r = rng(21);
    let cfg = TccaConfig {
        attr_width: 1,
        frames: 3,
        hidden: 5,
        d_k: 4,
        d_v: 4,
        out_width: 3,
        kv_axis: axis,
    };
    let mut store = ParamStore::new();
    let tcca = Tcca::new(&mut store, "t", cfg, &mut r).unwrap();
    perturb(&mut store, 0.2, 22);
    let frames: Vec<Matrix> = (0..3).map(|_| random_matrix(N, 1, 1.0, &mut r)).collect();
    let geometry = random_matrix(N, 3, 1.0, &mut r);
    let c = random_matrix(N, 6, 1.0, &mut r);
    let loss = |vals: &[Matrix]| -> (f64, Vec<Matrix>) {
        let mut s = store.clone();
        s.values_mut().clone_from_slice(&vals[3..]);
        let mut g = Graph::new();
        let window: Vec<_> = vals[..3].iter().map(|m| g.param(m.clone())).collect();
        let geo = g.constant(geometry.clone());
        let mut p = Bound::trainable(&s);
        let out = tcca.forward(&mut g, &mut p, window[1], &window, geo);
        let l = probe(&mut g, out.features, &c);
        let value = g.value(l).get(0, 0);
        let grads = g.backward(l);
        let mut all: Vec<Matrix> = window.iter().map(|&w| grads.get(w).unwrap().clone()).collect();
        all.extend(p.grads(&grads));
        (value, all)
    };
    let mut values = frames;
    values.extend(store.values().iter().cloned());
    let (_, analytic) = loss(&values);
    fd_check(&values, &analytic, &all_coords(&values), MAX_REL, |v| loss(v).0)
}

pub fn full_model_report() -> FdReport {
    let mut r = rng(31);
    let config = ModelConfig {
        radius: 1,
        ..ModelConfig::toy()
    };
    let base = random_frame(N, 1, 0, &mut r);
    let frames: Vec<_> = (0..3)
        .map(|_| {
            let noise = random_matrix(N, 1, 20.0, &mut r);
            let mut a = base.attributes().clone();
            a.add_assign(&noise);
            base.with_attributes(a).unwrap()
        })
        .collect();
    let original = random_matrix(N, 1, 30.0, &mut r).zip_map(base.attributes(), |a, b| a + b);
    let window = TemporalWindow::new(frames, 1).unwrap();
    let prepared = prepare_window(&window, &config).unwrap();
    let mut params = BqeParams::new(&config).unwrap();
    // Leave the zero-initialised head so the trunk receives gradient.
    perturb(&mut params.store, 0.05, 32);
    let quality = QualityVector::new([0.2, 0.3, 0.5]).unwrap();
    let (_, grads) = bqe_loss_and_grad(&params, &prepared, &original, quality);
    let coords = sampled_coords(params.store.values(), 6, &mut r);
    fd_check(params.store.values(), &grads, &coords, MAX_REL, |vals| {
        let mut p = params.clone();
        p.store.values_mut().clone_from_slice(vals);
        bqe_loss_value(&p, &prepared, &original, quality)
    })
}

/// Cross entropy with respect to `p`, on the tape versus the plain function.
pub fn cross_entropy_report() -> FdReport {
    let g_label = [0.1, 0.6, 0.3];
    let p0 = Matrix::from_vec(1, 3, vec![0.25, 0.45, 0.3]);
    let mut g = Graph::new();
    let pv = g.param(p0.clone());
    let l = g.soft_cross_entropy(pv, &g_label);
    let analytic = vec![g.backward(l).get(pv).unwrap().clone()];
    fd_check(
        std::slice::from_ref(&p0),
        &analytic,
        &all_coords(std::slice::from_ref(&p0)),
        OBJECTIVE_REL,
        |v| {
            let d = v[0].data();
            qe_loss(&[d[0], d[1], d[2]], &g_label)
        },
    )
}

pub fn mse_report() -> FdReport {
    let mut r = rng(41);
    let e0 = random_matrix(N, 1, 100.0, &mut r);
    let o = random_matrix(N, 1, 100.0, &mut r);
    let mut g = Graph::new();
    let ev = g.param(e0.clone());
    let ov = g.constant(o.clone());
    let l = g.mse(ev, ov);
    let analytic = vec![g.backward(l).get(ev).unwrap().clone()];
    fd_check(
        std::slice::from_ref(&e0),
        &analytic,
        &all_coords(std::slice::from_ref(&e0)),
        OBJECTIVE_REL,
        |v| bqe_loss(&v[0], &o).unwrap(),
    )
}

/// Every scenario with its label and tolerance.
pub fn all_reports() -> Vec<(String, FdReport, f64)> {
    vec![
        ("QE loss".into(), qe_loss_report(), MAX_REL),
        ("NA, pe=true".into(), na_report(true), MAX_REL),
        ("NA, pe=false".into(), na_report(false), MAX_REL),
        ("TCCA, Token".into(), tcca_report(KvAxis::Token), MAX_REL),
        ("TCCA, Channel".into(), tcca_report(KvAxis::Channel), MAX_REL),
        ("full model".into(), full_model_report(), MAX_REL),
        ("cross entropy".into(), cross_entropy_report(), OBJECTIVE_REL),
        ("mse".into(), mse_report(), OBJECTIVE_REL),
    ]
}
