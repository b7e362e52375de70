//! Closed-form checks of the loss, the learning-rate schedule and the
//! trellis resolutions. Each returns a short summary or what went wrong.

use stereonas::cell::{CellKind, OperationSet, OpsetVariant};
use stereonas::graph::smooth_l1_value;
use stereonas::search::{cosine_lr, SearchSchedule};
use stereonas::trellis::{feature_level_resolutions, SearchFeatureNet, TrellisConfig};
use stereonas::{rng, Graph, ParamGroup, ParamStore, Tensor};

type Check = Result<String, String>;

/// Loss and slope of one prediction against a zero target, through the graph.
fn loss_and_slope(x: f64) -> (f64, f64) {
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Weight, Tensor::new(vec![1], vec![x]).unwrap());
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let loss = g.smooth_l1(p, &[0.0], &[true]).unwrap();
    let value = g.scalar(loss);
    g.backward(loss, &mut store).unwrap();
    (value, store.tensor(id).grad().unwrap()[0])
}

pub fn smooth_l1() -> Check {
    let (at1, _) = loss_and_slope(1.0);
    let (at2, _) = loss_and_slope(2.0);
    if at1 != 0.5 || smooth_l1_value(1.0) != 0.5 {
        return Err(format!("loss(1) = {at1}, expected 0.5"));
    }
    if at2 != 1.5 || smooth_l1_value(2.0) != 1.5 {
        return Err(format!("loss(2) = {at2}, expected 1.5"));
    }
    let h = 1e-9;
    let (below, left) = loss_and_slope(1.0 - h);
    let (above, right) = loss_and_slope(1.0 + h);
    let slope_gap = (left - right).abs();
    if slope_gap >= 1e-6 {
        return Err(format!("slopes at the knee differ by {slope_gap:e}"));
    }
    let fd_left = (at1 - below) / h;
    let fd_right = (above - at1) / h;
    if (fd_left - fd_right).abs() >= 1e-6 {
        return Err(format!(
            "one-sided difference quotients {fd_left} and {fd_right} disagree"
        ));
    }
    Ok(format!(
        "loss(1) = {at1}, loss(2) = {at2}, knee slopes {left} / {right}"
    ))
}

pub fn cosine_endpoints() -> Check {
    let s = SearchSchedule::default();
    let start = cosine_lr(0, s.total_epochs, s.lr_start, s.lr_end);
    let end = cosine_lr(s.total_epochs, s.total_epochs, s.lr_start, s.lr_end);
    if start != 0.025 || end != 0.001 {
        return Err(format!("cosine_lr endpoints {start} and {end}, expected 0.025 and 0.001"));
    }
    Ok(format!("cosine_lr(0) = {start}, cosine_lr({}) = {end}", s.total_epochs))
}

pub fn resolutions() -> Check {
    let expected = vec![(64, 128), (32, 64), (16, 32), (8, 16)];
    let arithmetic = feature_level_resolutions(192, 384, 4);
    if arithmetic != expected {
        return Err(format!("level resolutions {arithmetic:?}, expected {expected:?}"));
    }
    // A four-layer trellis reaches every level; its activations must agree.
    let mut store = ParamStore::new();
    let mut r = rng::seeded(0);
    let net = SearchFeatureNet::new(
        &mut store,
        &mut r,
        TrellisConfig::new(4, 1),
        OperationSet::new(CellKind::Feature, OpsetVariant::Reduced),
        true,
    );
    let mut g = Graph::new();
    let image = g.constant(&Tensor::zeros(vec![1, 3, 192, 384]));
    let levels = net.trellis_levels(&mut g, &store, image).map_err(|e| e.to_string())?;
    let measured: Vec<(usize, usize)> = levels
        .iter()
        .map(|&v| {
            let s = g.shape(v);
            (s[2], s[3])
        })
        .collect();
    if measured != expected {
        return Err(format!("trellis activations have extents {measured:?}"));
    }
    Ok(format!("192x384 levels {measured:?}"))
}
