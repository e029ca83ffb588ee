use super::{GradientMap, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of the parameters.
///
/// Each coordinate of each parameter in `ids` is perturbed by `±h` in turn;
/// `store` is restored bitwise before returning.
pub fn finite_diff_grad<F>(mut f: F, store: &mut ParamStore, ids: &[ParamId], h: f64) -> Result<GradientMap>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", format!("{h} must be positive")));
    }
    let mut out = GradientMap::new();
    for &id in ids {
        let n = store.get(id).len();
        let mut grad = vec![0.0; n];
        for (k, slot) in grad.iter_mut().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let plus = f(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let minus = f(store);
            store.get_mut(id).data_mut()[k] = orig;
            *slot = (plus? - minus?) / (2.0 * h);
        }
        out.insert(id, Tensor::new(store.get(id).shape().to_vec(), grad)?);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// With `floor = 1e-2` and a threshold of `1e-4`, this accepts either a
/// relative error of `1e-4` or an absolute error of `1e-6`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::scalar(3.0));
        let g = finite_diff_grad(|s| Ok(s.get(p).item()?.powi(2)), &mut store, &[p], 1e-5).unwrap();
        assert!((g.get(p).unwrap().item().unwrap() - 6.0).abs() < 1e-8);
        assert_eq!(store.get(p).item().unwrap(), 3.0);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::vector(vec![1.0, -4.0, 0.3]));
        let g = finite_diff_grad(|_| Ok(42.0), &mut store, &[p], 1e-5).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::scalar(1.0));
        assert!(finite_diff_grad(|_| Ok(0.0), &mut store, &[p], 0.0).is_err());
    }
}
