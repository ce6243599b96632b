#![allow(dead_code)]

use hyperinr::config::ExperimentConfig;

const TEACHER_AND_HYPER: &str = r#"
[teacher]
width = 16
encoder_blocks = 1
trunk_blocks = 1
decoder_blocks = 1
epochs = 3
batch_size = 128

[hyper]
epochs = 3
batch_size = 256

[scene]
size = 24
"#;

pub fn tsr_config() -> ExperimentConfig {
    let text = format!(
        r#"
task = "tsr"
seed = 5

[dataset]
dims = [8, 8, 8]
training = {{ strategies = [{{ kind = "even_1d", count = 3 }}] }}

[encoders]
strategies = [{{ kind = "even_1d", count = 4 }}]

[distillation]
strategies = [{{ kind = "even_1d", count = 5 }}]

[encoder]
dim = 3
levels = 3
table_size = 512
features = 2
base_resolution = 2

[eval]
thetas = [[0.25], [0.6]]
{TEACHER_AND_HYPER}"#
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

pub fn nvs_config() -> ExperimentConfig {
    let text = format!(
        r#"
task = "nvs"
seed = 9

[dataset]
dims = [12, 12]
training = {{ strategies = [{{ kind = "grid", counts = [2, 2] }}] }}

[encoders]
strategies = [{{ kind = "grid", counts = [2, 2] }}]

[distillation]
strategies = [{{ kind = "grid", counts = [3, 3] }}]

[encoder]
dim = 2
levels = 3
table_size = 256
features = 2
base_resolution = 2

[eval]
thetas = [[45.0, 100.0]]
{TEACHER_AND_HYPER}"#
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

pub fn dgs_config() -> ExperimentConfig {
    let text = format!(
        r#"
task = "dgs"
seed = 2

[dataset]
dims = [8, 8, 8]
training = {{ strategies = [{{ kind = "grid", counts = [2, 2] }}] }}

[encoders]
strategies = [{{ kind = "poisson", radius = 0.45 }}]
seed = 4

[distillation]
strategies = [{{ kind = "grid", counts = [2, 2] }}, {{ kind = "gaussian", count = 4, sigma = 0.05 }}]
seed = 6

[encoder]
dim = 3
levels = 2
table_size = 256
features = 2
base_resolution = 2

[eval]
thetas = [[30.0, 90.0]]
{TEACHER_AND_HYPER}"#
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

pub fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}
