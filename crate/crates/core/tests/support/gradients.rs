//! Finite-difference checks of every differentiable building block. Each
//! case returns one report per configuration it exercises.

use rand::Rng as _;
use stereonas::cell::{
    mixed_op, CellAlpha, CellKind, CellOp, CellTopology, MixedCell, OperationSet, OpsetVariant,
};
use stereonas::data::{generate_rds, RdsSpec};
use stereonas::gradcheck::{all_entries, check, GradReport};
use stereonas::rng::{self, Rng};
use stereonas::stereo::{full_forward, project_disparity, SuperNet, SuperNetConfig};
use stereonas::{ConvSpec, Graph, ParamGroup, ParamId, ParamStore, Result, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn leaf(store: &mut ParamStore, rng: &mut Rng, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, ParamGroup::Weight, random_tensor(rng, shape))
}

/// Reduces `out` to a scalar with fixed random weights so that every output
/// entry contributes a distinct amount.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng::seeded(seed);
    let r = random_tensor(&mut rng, g.shape(out));
    let r = g.constant(&r);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

/// Runs backward once, then compares against finite differences.
fn run_check(
    store: &mut ParamStore,
    entries: &[(ParamId, usize)],
    floor: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> GradReport {
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store).unwrap();
    g.backward(loss, store).unwrap();
    check(store, entries, STEP, floor, |s| {
        let mut g = Graph::new();
        let l = f(&mut g, s)?;
        Ok(g.scalar(l))
    })
    .unwrap()
}


fn every_entry(store: &ParamStore) -> Vec<(ParamId, usize)> {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    all_entries(store, &ids)
}

fn sampled(store: &ParamStore, ids: &[ParamId], count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let all = all_entries(store, ids);
    let mut rng = rng::seeded(seed);
    (0..count).map(|_| all[rng.gen_range(0..all.len())]).collect()
}

pub fn conv2d() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(1);
    for spec in [
        ConvSpec::new(2, 3, 4, 3),
        ConvSpec::new(2, 3, 4, 3).stride(3).padding(0),
        ConvSpec::new(2, 4, 4, 3).dilation(2).padding(2).groups(4),
    ] {
        let mut store = ParamStore::new();
        let x = leaf(&mut store, &mut rng, "x", &[2, spec.in_channels, 6, 9]);
        let w = leaf(&mut store, &mut rng, "w", &spec.weight_shape());
        let entries = every_entry(&store);
        let r = run_check(&mut store, &entries, 1e-8, |g, s| {
            let (xv, wv) = (g.param(s, x), g.param(s, w));
            let y = g.conv(xv, wv, &spec)?;
            probe(g, y, 11)
        });
        reports.push(r);
    }
    reports
}

pub fn conv3d() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(2);
    for spec in [ConvSpec::new(3, 2, 3, 3), ConvSpec::new(3, 2, 3, 1)] {
        let mut store = ParamStore::new();
        let x = leaf(&mut store, &mut rng, "x", &[1, 2, 3, 4, 5]);
        let w = leaf(&mut store, &mut rng, "w", &spec.weight_shape());
        let entries = every_entry(&store);
        let r = run_check(&mut store, &entries, 1e-8, |g, s| {
            let (xv, wv) = (g.param(s, x), g.param(s, w));
            let y = g.conv(xv, wv, &spec)?;
            probe(g, y, 12)
        });
        reports.push(r);
    }
    reports
}

pub fn interpolate() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(3);
    let cases: [(&[usize], &[usize]); 4] = [
        (&[1, 2, 3, 5], &[7, 9]),
        (&[1, 2, 6, 8], &[3, 4]),
        (&[1, 1, 2, 3, 4], &[4, 6, 8]),
        (&[2, 1, 4, 4, 6], &[12, 8, 12]),
    ];
    for (shape, target) in cases {
        let mut store = ParamStore::new();
        let x = leaf(&mut store, &mut rng, "x", shape);
        let entries = every_entry(&store);
        let r = run_check(&mut store, &entries, 1e-8, |g, s| {
            let xv = g.param(s, x);
            let y = g.interpolate(xv, target)?;
            probe(g, y, 13)
        });
        reports.push(r);
    }
    reports
}

pub fn softmax() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(4);
    for axis in 0..3 {
        let mut store = ParamStore::new();
        let x = leaf(&mut store, &mut rng, "x", &[2, 5, 3]);
        let entries = every_entry(&store);
        let r = run_check(&mut store, &entries, 1e-8, |g, s| {
            let xv = g.param(s, x);
            let y = g.softmax(xv, axis)?;
            probe(g, y, 14)
        });
        reports.push(r);
    }
    reports
}

pub fn normalize() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(5);
    let mut store = ParamStore::new();
    let x = leaf(&mut store, &mut rng, "x", &[2, 3, 2, 4]);
    let entries = every_entry(&store);
    let r = run_check(&mut store, &entries, 1e-8, |g, s| {
        let xv = g.param(s, x);
        let y = g.normalize(xv)?;
        probe(g, y, 15)
    });
    reports.push(r);
    reports
}

pub fn smooth_l1() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(6);
    let mut store = ParamStore::new();
    let n = 40;
    // Keep every residual away from the knee at |x| = 1 and from zero.
    let target: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
    let pred: Vec<f64> = target
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let r = [0.3, -0.6, 1.7, -2.4][i % 4];
            t + r
        })
        .collect();
    let mask: Vec<bool> = (0..n).map(|i| i % 7 != 0).collect();
    let p = store.add("pred", ParamGroup::Weight, Tensor::new(vec![1, 5, 8], pred).unwrap());
    let entries = every_entry(&store);
    let r = run_check(&mut store, &entries, 1e-8, |g, s| {
        let pv = g.param(s, p);
        g.smooth_l1(pv, &target, &mask)
    });
    reports.push(r);
    reports
}

pub fn project_disparity_to_full_resolution() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(7);
    let mut store = ParamStore::new();
    let cost = leaf(&mut store, &mut rng, "cost", &[1, 1, 4, 8, 16]);
    let entries = every_entry(&store);
    let r = run_check(&mut store, &entries, 1e-8, |g, s| {
        let c = g.param(s, cost);
        let d = project_disparity(g, c, (24, 48), 12)?;
        probe(g, d, 17)
    });
    reports.push(r);
    reports
}

fn randomise_alpha(store: &mut ParamStore, alpha: &CellAlpha, rng: &mut Rng) {
    for &id in &alpha.edges {
        for v in store.tensor_mut(id).values_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
}

pub fn mixed_op_over_both_operation_sets() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(8);
    for (kind, variant, shape) in [
        (CellKind::Feature, OpsetVariant::Reduced, vec![1, 4, 6, 6]),
        (CellKind::Feature, OpsetVariant::Large, vec![1, 4, 6, 6]),
        (CellKind::Matching, OpsetVariant::Reduced, vec![1, 4, 3, 4, 4]),
    ] {
        let mut store = ParamStore::new();
        let opset = OperationSet::new(kind, variant);
        let ops: Vec<CellOp> = opset
            .ops
            .iter()
            .map(|&op| CellOp::new(&mut store, &mut rng, op.name(), op, kind, 4))
            .collect();
        let a = store.add("alpha", ParamGroup::FeatureArch, random_tensor(&mut rng, &[opset.len()]));
        let x = leaf(&mut store, &mut rng, "x", &shape);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        let mut entries = all_entries(&store, &[a, x]);
        entries.extend(sampled(&store, &ids, 40, 80));
        let r = run_check(&mut store, &entries, 1e-6, |g, s| {
            let av = g.param(s, a);
            let w = g.softmax(av, 0)?;
            let xv = g.param(s, x);
            let y = mixed_op(g, s, w, &ops, xv)?;
            probe(g, y, 18)
        });
        reports.push(r);
    }
    reports
}

pub fn cell_forward() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(9);
    for (kind, residual, shape, target) in [
        (CellKind::Feature, true, vec![1, 6, 6, 8], vec![3, 4]),
        (CellKind::Feature, false, vec![1, 6, 6, 8], vec![6, 8]),
        (CellKind::Matching, true, vec![1, 6, 2, 4, 4], vec![2, 4, 4]),
    ] {
        let mut store = ParamStore::new();
        let topo = CellTopology::new(residual);
        let opset = OperationSet::new(kind, OpsetVariant::Reduced);
        let cell = MixedCell::new(&mut store, &mut rng, "cell", &topo, &opset, (6, 6), 3);
        let alpha = CellAlpha::new(&mut store, "cell", ParamGroup::FeatureArch, &topo, &opset);
        randomise_alpha(&mut store, &alpha, &mut rng);
        let x0 = leaf(&mut store, &mut rng, "x0", &shape);
        let x1 = leaf(&mut store, &mut rng, "x1", &shape);
        let weights = store.ids_in(|g| g == ParamGroup::Weight);
        let mut entries = all_entries(&store, &alpha.edges);
        entries.extend(sampled(&store, &weights, 60, 90));
        let r = run_check(&mut store, &entries, 1e-6, |g, s| {
            let mixing = alpha.mixing_weights(g, s)?;
            let (a, b) = (g.param(s, x0), g.param(s, x1));
            let y = cell.forward(g, s, &mixing, a, b, &target)?;
            probe(g, y, 19)
        });
        reports.push(r);
    }
    reports
}

pub fn full_forward_on_toy_sample() -> Vec<GradReport> {
    let mut reports = Vec::new();
    let (net, mut store) = SuperNet::new(SuperNetConfig::default(), 3);
    // Non-uniform architecture parameters exercise every mixing path.
    let mut rng = rng::seeded(10);
    let arch = store.ids_in(|g| g.is_arch());
    for &id in &arch {
        for v in store.tensor_mut(id).values_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let sample = generate_rds(&RdsSpec::random(24, 48, 0.5, 12, 4)).unwrap();
    let weights = store.ids_in(|g| g == ParamGroup::Weight);
    let mut entries = sampled(&store, &weights, 20, 100);
    entries.extend(sampled(&store, &net.feature_arch_ids(), 10, 101));
    entries.extend(sampled(&store, &net.matching_arch_ids(), 10, 102));
    store.zero_grad();
    let pass = full_forward(&net, &store, &[&sample], 12).unwrap();
    pass.graph.backward(pass.loss, &mut store).unwrap();
    let r = check(&mut store, &entries, STEP, 1e-6, |s| {
        Ok(full_forward(&net, s, &[&sample], 12)?.loss_value())
    })
    .unwrap();
    reports.push(r);
    reports
}

/// Name, tolerance and check of every case in the suite.
pub const CASES: &[(&str, f64, fn() -> Vec<GradReport>)] = &[
    ("conv2d", PRIMITIVE_TOL, conv2d),
    ("conv3d", PRIMITIVE_TOL, conv3d),
    ("interpolate", PRIMITIVE_TOL, interpolate),
    ("softmax", PRIMITIVE_TOL, softmax),
    ("normalize", PRIMITIVE_TOL, normalize),
    ("smooth_l1", PRIMITIVE_TOL, smooth_l1),
    ("project_disparity", PRIMITIVE_TOL, project_disparity_to_full_resolution),
    ("mixed_op", COMPOSITE_TOL, mixed_op_over_both_operation_sets),
    ("cell_forward", COMPOSITE_TOL, cell_forward),
    ("full_forward", COMPOSITE_TOL, full_forward_on_toy_sample),
];

/// Largest relative error over the reports, or a description of the first
/// one that misses `tol`.
pub fn worst_within(name: &str, reports: &[GradReport], tol: f64) -> std::result::Result<f64, String> {
    let mut worst = 0.0_f64;
    for r in reports {
        if r.checked == 0 {
            return Err(format!("{name}: nothing checked"));
        }
        if !(r.max_rel_error < tol) {
            return Err(format!(
                "{name}: max relative error {:.3e} at {:?}",
                r.max_rel_error, r.worst
            ));
        }
        worst = worst.max(r.max_rel_error);
    }
    Ok(worst)
}
