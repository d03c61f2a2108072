//! The built-in finite-difference suite: every primitive, loss and network
//! forward pass, plus unrolled meta-gradients through five inner steps.

fn main() -> tsmd::Result<()> {
    let outcomes = tsmd::commands::gradcheck()?;
    println!("{} checks passed", outcomes.len());
    Ok(())
}
