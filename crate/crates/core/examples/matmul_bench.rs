use ndarray::Array2;
use std::time::Instant;

fn bench<T: ndarray::LinalgScalar + From<f32> + PartialEq>(name: &str, m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<T>::from_elem((m, k), T::from(1.01f32));
    let b = Array2::<T>::from_elem((k, n), T::from(0.99f32));
    let t0 = Instant::now();
    let mut acc = T::zero();
    for _ in 0..reps {
        let c = a.dot(&b);
        acc = acc + c[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("{name} {m}x{k}x{n}: {:.2} GFLOP/s (acc shape {:?})", flops / dt / 1e9, acc != T::zero());
}

fn main() {
    for &(m, k, n) in &[(64usize, 64usize, 64usize), (32, 64, 64), (256, 64, 64), (61, 64, 128)] {
        bench::<f32>("f32", m, k, n, 20000);
        bench::<f64>("f64", m, k, n, 20000);
    }
}
