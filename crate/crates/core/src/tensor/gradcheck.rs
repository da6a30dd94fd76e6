//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::TensorError;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many entries per parameter tensor; half are the
    /// largest analytic gradients, the rest drawn at random. `None` checks
    /// every entry.
    pub entries_per_param: Option<usize>,
    pub seed: u64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is zero are judged on absolute error.
    pub abs_floor: f64,
    /// When a perturbation flips the sign of some relu input, the difference
    /// straddles a kink; the step is divided by 10 and the entry retried, at
    /// most this many times.
    pub kink_refinements: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            entries_per_param: None,
            seed: 0,
            abs_floor: 1e-6,
            kink_refinements: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
    pub worst: Option<EntryError>,
    pub checked: usize,
    /// Relu inputs within a few steps of zero at the base point.
    pub near_kinks: usize,
    /// Entries whose step had to shrink to stay on one side of every kink.
    pub refined: usize,
    /// Entries still straddling a kink at the smallest step; their error is
    /// reported as is.
    pub straddling: usize,
}

/// Compares the tape gradient of `loss` with central differences
/// `(f(x+h) - f(x-h)) / 2h` for every parameter of `store`.
///
/// `loss` receives a fresh tape and one [`Var`] per parameter and must be
/// deterministic. The store is restored before returning.
pub fn grad_check<F, E>(
    store: &mut ParamStore,
    mut loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let near_kinks = tape.relu_inputs_near_zero(10.0 * opts.step);
    let base_pattern = tape.relu_pattern();
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<(f64, Vec<bool>), E> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let root = loss(&mut tape, &vars)?;
        Ok((tape.value(root).item(), tape.relu_pattern()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::new(),
        worst: None,
        checked: 0,
        near_kinks,
        refined: 0,
        straddling: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .get(vars[id.index()])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let entries = select_entries(&analytic, opts.entries_per_param, &mut rng);
        let mut worst_here = 0.0f64;
        for e in entries {
            let orig = store.get(id).data()[e];
            let mut step = opts.step;
            let mut attempt = 0;
            let numeric = loop {
                store.get_mut(id).data_mut()[e] = orig + step;
                let plus = eval(store);
                store.get_mut(id).data_mut()[e] = orig - step;
                let minus = eval(store);
                store.get_mut(id).data_mut()[e] = orig;
                let ((fp, pp), (fm, pm)) = (plus?, minus?);
                let smooth = pp == base_pattern && pm == base_pattern;
                if smooth || attempt == opts.kink_refinements {
                    report.refined += usize::from(attempt > 0);
                    report.straddling += usize::from(!smooth);
                    break (fp - fm) / (2.0 * step);
                }
                attempt += 1;
                step /= 10.0;
            };
            let a = analytic[e];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            worst_here = worst_here.max(rel);
            if report.worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                report.worst = Some(EntryError {
                    param: store.name(id).to_string(),
                    entry: e,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst_here);
        report.per_param.push((store.name(id).to_string(), worst_here));
    }
    Ok(report)
}

fn select_entries(grad: &[f64], limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    let k = match limit {
        Some(k) if k < n => k,
        _ => return (0..n).collect(),
    };
    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
    let top = k.div_ceil(2);
    let mut chosen: Vec<usize> = by_size[..top].to_vec();
    let rest = &by_size[top..];
    for i in sample(rng, rest.len(), k - top) {
        chosen.push(rest[i]);
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(1, 2, vec![0.3, -0.7]).unwrap());
        // exp is right; a constant stands in for a gradient-blocking bug
        let ok = grad_check(
            &mut store,
            |t: &mut Tape, p: &[Var]| -> Result<Var, TensorError> {
                let e = t.exp(p[0]);
                Ok(t.sum(e))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(ok.max_rel_error < 1e-8);
        let bad = grad_check(
            &mut store,
            |t: &mut Tape, p: &[Var]| -> Result<Var, TensorError> {
                let frozen = t.constant(t.value(p[0]).clone());
                let e = t.exp(frozen);
                let s = t.sum(e);
                let lin = t.sum(p[0]);
                t.add(s, lin)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(bad.max_rel_error > 0.1);
        assert_eq!(bad.worst.unwrap().param, "x");
    }

    #[test]
    fn steps_shrink_away_from_relu_kinks() {
        let mut store = ParamStore::new();
        // 4e-6 sits inside the default step of the kink at 0
        store.add("x", Tensor::new(1, 2, vec![4e-6, 0.5]).unwrap());
        let relu_sum = |t: &mut Tape, p: &[Var]| -> Result<Var, TensorError> {
            let r = t.relu(p[0]);
            Ok(t.sum(r))
        };
        let naive = grad_check(
            &mut store,
            relu_sum,
            &GradCheckOptions {
                kink_refinements: 0,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!((naive.max_rel_error - 0.3).abs() < 1e-6);
        assert_eq!((naive.refined, naive.straddling), (0, 1));
        let refined = grad_check(&mut store, relu_sum, &GradCheckOptions::default()).unwrap();
        assert!(refined.max_rel_error < 1e-9);
        assert_eq!((refined.refined, refined.straddling), (1, 0));
        assert_eq!(store.get(store.find("x").unwrap()).data(), &[4e-6, 0.5]);
    }

    #[test]
    fn sampling_keeps_largest_entries() {
        let g = [0.0, 5.0, -9.0, 0.1, 0.2, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chosen = select_entries(&g, Some(3), &mut rng);
        assert_eq!(chosen.len(), 3);
        assert!(chosen.contains(&1) && chosen.contains(&2));
        assert_eq!(select_entries(&g, None, &mut rng).len(), 6);
    }
}
