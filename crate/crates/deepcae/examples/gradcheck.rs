//! Check the analytic machinery against finite differences, the same
//! two oracles the `deepcae gradcheck` subcommand runs.
//!
//! First the penalty itself: the full-encoder penalty of a single
//! sample must equal the squared Frobenius norm of a numerically
//! differentiated encoder Jacobian. Then the tape: every parameter
//! gradient of the total loss must match central differences.
//!
//! Run with: cargo run --release --example gradcheck

use deepcae::models::{AutoencoderModel, EncoderSpec, Variant};
use deepcae::penalty::deepcae_penalty;
use deepcae::tensor::{
    finite_diff_gradient, finite_diff_jacobian, rel_err_matrix, rel_err_scalar, Matrix, Tape,
};
use deepcae::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut worst_penalty = 0.0f64;
    let mut worst_grad = 0.0f64;

    for case in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let dim = rng.gen_range(3..=7usize);
        let layers = rng.gen_range(1..=3usize);
        let spec = EncoderSpec::new(dim, 0.5, layers)?;
        let model = AutoencoderModel::init(spec, Variant::DeepCae, 0.5, rng.gen())?;

        // Penalty vs. a numerical Jacobian of the encoder map.
        let x = Matrix::from_fn(1, dim, |_, _| rng.gen_range(-0.9..0.9));
        let (_, trace) = model.encode(&x)?;
        let analytic = deepcae_penalty(&trace, &model.encoder_weights())?.value();
        let jac = finite_diff_jacobian(
            |flat| {
                let input = Matrix::new(1, flat.len(), flat.to_vec())?;
                Ok(model.encode(&input)?.0.data().to_vec())
            },
            x.data(),
            1e-5,
        )?;
        let penalty_err = rel_err_scalar(analytic, jac.frobenius_sq());
        worst_penalty = worst_penalty.max(penalty_err);

        // First-layer weight gradient of the full loss vs. central
        // differences through an actual re-evaluation of the model.
        let batch = Matrix::from_fn(4, dim, |_, _| rng.gen_range(-0.9..0.9));
        let mut tape = Tape::new();
        let nodes = model.build_loss(&mut tape, &batch)?;
        let grads = tape.backward(nodes.total)?;
        let analytic_grad = grads.wrt(nodes.encoder[0].0).clone();
        let numeric_grad = finite_diff_gradient(
            |w| {
                let mut probe = model.clone();
                probe.encoder[0].w = w.clone();
                Ok(probe.loss(&batch)?.total)
            },
            &model.encoder[0].w,
            1e-4,
        )?;
        let grad_err = rel_err_matrix(&analytic_grad, &numeric_grad)?;
        worst_grad = worst_grad.max(grad_err);

        println!(
            "case {case:2}: dim {dim}, {layers} layer(s): penalty rel err {penalty_err:.2e}, \
             gradient rel err {grad_err:.2e}"
        );
    }

    println!();
    println!("worst penalty error  {worst_penalty:.3e} (tolerance 1e-5)");
    println!("worst gradient error {worst_grad:.3e} (tolerance 1e-4)");
    assert!(worst_penalty < 1e-5 && worst_grad < 1e-4);
    println!("analytic values agree with finite differences");
    Ok(())
}
