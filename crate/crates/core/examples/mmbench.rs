use orthonet::linalg::{qr, svd, DenseMatrix};
use orthonet::rng::Stream;
use std::time::Instant;

fn main() {
    let mut s = Stream::new(1);
    let w = DenseMatrix::<f64>::from_fn(784, 256, |_, _| s.normal_f64());
    let t = Instant::now();
    let f = qr(&w).unwrap();
    println!("qr 784x256: {:.4} s (r00 {:.3})", t.elapsed().as_secs_f64(), f.r[(0, 0)]);
    let t = Instant::now();
    let f = svd(&w).unwrap();
    println!("svd 784x256: {:.4} s (smax {:.3})", t.elapsed().as_secs_f64(), f.s[0]);
}
