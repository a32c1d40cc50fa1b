use rand::Rng;
use rand_distr::{Distribution, Normal};
use rpstn_tensor::{Element, ParamId, ParamStore, Tensor};

/// Zero-mean normal weights with standard deviation `std`.
pub fn normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// He-normal conv weight `[cout, cin, k, k]` plus a zero bias.
pub fn conv<T: Element, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> (ParamId, ParamId) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let w = store.add(format!("{name}.weight"), normal(rng, &[cout, cin, k, k], std));
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
    (w, b)
}
