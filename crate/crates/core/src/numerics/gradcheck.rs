//! Central-difference gradient oracle.

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Tensor};

/// Relative error between an analytic and a numeric derivative. Entries
/// whose magnitudes are both below `floor` are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `f` w.r.t. each input against
/// `(f(x+h) − f(x−h)) / 2h`, elementwise.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect()
    };
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            record(&mut report, i, j, analytic[i][j], numeric);
        }
    }
    report
}

/// Same check over every trainable tensor of a parameter store.
pub fn grad_check_params<F>(f: F, store: &ParamStore, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store);
    let grads = tape.backward(out);
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    tape.accumulate_param_grads(&grads, &mut with_grads);

    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let out = f(&mut tape, s);
        tape.scalar(out)
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let ids: Vec<_> = store.iter().filter(|(_, _, t)| t.requires_grad()).map(|(id, _, _)| id).collect();
    for id in ids {
        let analytic = with_grads
            .get(id)
            .grad()
            .map_or_else(|| vec![0.0; store.get(id).len()], <[f64]>::to_vec);
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let fp = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let fm = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            record(&mut report, id.index(), j, analytic[j], (fp - fm) / (2.0 * h));
        }
    }
    report
}

fn record(report: &mut GradCheckReport, i: usize, j: usize, analytic: f64, numeric: f64) {
    let err = relative_error(analytic, numeric, DEFAULT_FLOOR);
    report.checked += 1;
    if err > report.max_rel_error || report.worst.is_none() {
        report.max_rel_error = report.max_rel_error.max(err);
        report.worst = Some((i, j, analytic, numeric));
    }
}
