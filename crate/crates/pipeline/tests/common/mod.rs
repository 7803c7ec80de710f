#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
seed = 11
output_dir = "run"

[dataset]
families = ["cup", "box"]
objects = 3
views_per_object = 4
held_out_views = 1
image_size = 16
fov_deg = 40.0
scale_range = [0.1, 0.15]
distance_range = [2.5, 3.0]
elevation_deg = [15.0, 50.0]
held_out_elevation_deg = [-5.0, 5.0]
sdf_points = 2000
uniform_fraction = 0.2
surface_sigma = 0.01
light = [0.3, 1.0, 0.5]

[triplane]
lod = 2
latent_dim = 2
hidden = [16]
alpha_tv = 0.01
init_std = 0.1

[triplane.train]
peak_lr = 0.01
warmup_steps = 5
total_steps = 40
batch_size = 500

[diffusion]
solver = "dpm-solver++"

[diffusion.schedule]
steps = 1000
beta_start = 0.0001
beta_end = 0.02

[diffusion.norf]
steps = 4
cfg_weight = 0.0
dropout = 0.5
widths = [8, 16]
time_dim = 16

[diffusion.norf.train]
peak_lr = 0.001
warmup_steps = 2
total_steps = 8
batch_size = 4

[diffusion.shape]
steps = 3
cfg_weight = 0.0
dropout = 0.2
widths = [8, 8]
time_dim = 16

[diffusion.shape.train]
peak_lr = 0.001
warmup_steps = 2
total_steps = 8
batch_size = 4

[eval]
n_points = 400
f_threshold = 0.02
rotation_set = "identity"
hypotheses = 3
mesh_lod = 4
ransac_iterations = 64
threshold_fraction = 0.02
"#;

pub fn norf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_norf"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a subcommand and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str]) -> String {
    let out = norf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Runs every stage of the pipeline on `config`.
pub fn run_all(config: &Path) {
    let c = config.to_str().unwrap();
    ok(&["gen-dataset", "--config", c]);
    ok(&["fit-triplanes", "--config", c]);
    ok(&["train-denoiser", "--config", c, "--stage", "norf"]);
    ok(&["train-denoiser", "--config", c, "--stage", "shape"]);
    ok(&["estimate", "--config", c]);
    ok(&["eval", "--config", c]);
}
