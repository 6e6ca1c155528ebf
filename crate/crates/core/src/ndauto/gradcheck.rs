//! Central finite-difference verification of analytic gradients.

use super::{Graph, NdError, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from dominating the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic parameter gradients of the scalar `f` against central
/// differences with step `h`. At most `max_per_param` entries of each
/// parameter are probed (evenly strided), which keeps large layers tractable.
pub fn grad_check<F>(store: &mut ParamStore, f: F, h: f64, tol: f64, max_per_param: usize) -> Result<GradCheckReport, NdError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NdError>,
{
    let eval = |store: &ParamStore| -> Result<f64, NdError> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?.accumulate(store, 1.0);

    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.numel();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get(id).grad[i];
            worst = worst.max(relative_error(analytic, numeric, 1e-6));
            checked += 1;
        }
        params.push(ParamCheck { name: store.get(id).name.clone(), max_rel_error: worst, checked });
    }
    store.zero_grad();
    Ok(GradCheckReport { params, tol })
}
