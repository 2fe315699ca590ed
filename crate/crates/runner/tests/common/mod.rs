#![allow(dead_code)]

use std::path::Path;

use randprune_runner::ExperimentConfig;

/// Small, fast experiment on the Gaussian-mixture task.
pub fn small_config(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
output_dir = "{}"
mask_seed = 5
init_seed = 9

[network]
family = "mlp"
width = 12
depth = 2

[dataset]
kind = "gaussian_mixture"
classes = 4
samples = 400
dim = 6
seed = 7
ood_classes = 1

[sparsity]
method = "erk"
level = 0.6

[train]
epochs = 4
batch_size = 16
learning_rate = 0.05
decay_milestones = [2, 3]
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

/// Desk-scale synthetic image task used by the trend checks.
pub fn image_config(out: &Path, width: usize) -> ExperimentConfig {
    let text = format!(
        r#"
output_dir = "{}"
mask_seed = 0
init_seed = 0

[network]
family = "mlp"
width = {width}
depth = 1

[dataset]
kind = "image_grid"
samples = 3000
seed = 0
noise = 0.25

[sparsity]
method = "uniform"
level = 0.8

[train]
epochs = 20
batch_size = 32
learning_rate = 0.05
decay_milestones = [10, 15]

[metrics]
ece = false
nll = false
fgsm = false
ood = false
grad_flow = false
every = 20
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

pub fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap()).filter(|e| e.path().is_file()).map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())).collect();
    out.sort();
    out
}
