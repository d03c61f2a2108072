//! The distillation losses: softened KL between logits and relational (RKD)
//! distance and angle losses between embeddings.

use tsmd::autodiff::{Graph, Tensor};
use tsmd::losses::{kd_kl, rkd_angle, rkd_distance};

fn main() -> tsmd::Result<()> {
    let g = Graph::new();
    let teacher = Tensor::new(vec![2, 3], vec![2.0, 0.5, -1.0, 0.0, 1.0, 0.3])?;
    let student = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.2, 0.1, 0.9])?;
    let kl = |t: &Tensor, s: &Tensor| -> tsmd::Result<f64> { kd_kl(t, &g.constant(s.clone())?, 4.0)?.value().item() };
    println!("kd_kl(teacher, student)         = {:.6}", kl(&teacher, &student)?);
    println!("kd_kl(teacher, teacher)         = {:.6}", kl(&teacher, &teacher)?);
    println!(
        "kd_kl after shifting all logits = {:.6}",
        kl(&teacher.map(|v| v + 10.0), &student)?
    );

    // Teacher points on a line at distances {1, 1, 2}; student points on an
    // equilateral triangle.
    let line = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0])?;
    let h = 3f64.sqrt() / 2.0;
    let triangle = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.5, h])?;
    let dist = rkd_distance(&line, &g.constant(triangle.clone())?, 1.0)?
        .value()
        .item()?;
    println!("rkd_distance(line, triangle)    = {dist:.6}");
    let scaled = rkd_distance(&line, &g.constant(triangle.map(|v| 5.0 * v))?, 1.0)?
        .value()
        .item()?;
    println!("  with the triangle scaled by 5 = {scaled:.6}");
    let angle = rkd_angle(&line, &g.constant(triangle)?)?.value().item()?;
    println!("rkd_angle(line, triangle)       = {angle:.6}");
    Ok(())
}
