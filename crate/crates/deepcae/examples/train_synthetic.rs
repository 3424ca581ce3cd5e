//! Smallest end-to-end run: train one contractive autoencoder on
//! synthetic cluster data and compare its test reconstruction with a
//! PCA baseline at the same embedding width.
//!
//! Run with: cargo run --release --example train_synthetic

use deepcae::models::{AutoencoderModel, EncoderSpec, PcaBaseline, Variant};
use deepcae::synth;
use deepcae::tensor::Matrix;
use deepcae::train::{fit, TrainConfig};
use deepcae::Result;

fn main() -> Result<()> {
    let data = synth::blobs(42, 300, 200, 12, 4);
    let n_val = data.train.rows() / 10;
    let n_fit = data.train.rows() - n_val;
    let x_train = Matrix::from_fn(n_fit, data.train.cols(), |i, j| data.train.get(i, j));
    let x_val = Matrix::from_fn(n_val, data.train.cols(), |i, j| data.train.get(n_fit + i, j));

    let spec = EncoderSpec::new(data.train.cols(), 0.5, 2)?;
    println!(
        "dataset {:?}: {} train / {} val / {} test rows, {} -> {} dims over {} layers",
        data.name,
        x_train.rows(),
        x_val.rows(),
        data.test.rows(),
        spec.input_dim(),
        spec.embedding_dim(),
        spec.num_layers()
    );

    let model = AutoencoderModel::init(spec, Variant::DeepCae, 1e-3, 7)?;
    let mut config = TrainConfig::new(1e-3, 1e-3, 7);
    config.batch_size = 32;
    config.max_epochs = 200;
    let result = fit(&model, &x_train, &x_val, &config)?;

    println!(
        "trained for {} epochs in {:.2}s (best validation at epoch {})",
        result.stopped_epoch, result.wall_time_seconds, result.best_epoch
    );
    for (e, stats) in result.history.iter().enumerate() {
        if e % 25 == 0 || e + 1 == result.history.len() {
            println!(
                "  epoch {:3}: train recon {:.5}, penalty {:.5}, val recon {:.5}",
                e + 1,
                stats.train_recon,
                stats.train_penalty,
                stats.val_recon
            );
        }
    }

    let ae_mse = data.test.mse(&result.model.reconstruct(&data.test)?)?;
    let pca = PcaBaseline::fit(&x_train, result.model.embedding_dim())?;
    let pca_mse = data.test.mse(&pca.reconstruct(&data.test)?)?;
    println!(
        "test reconstruction MSE: autoencoder {:.5} vs PCA {:.5} (ratio {:.3})",
        ae_mse,
        pca_mse,
        ae_mse / pca_mse
    );
    Ok(())
}
