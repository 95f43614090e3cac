//! End-to-end enhancement: scene synthesis, configuration, model
//! initialisation, the staged run, reports and file formats.

mod config;
mod io;
mod model;
mod run;
mod scene;

pub use config::{env_seed, load_config, parse_config, save_config, PipelineConfig, Precision, SEED_ENV};
pub use io::{
    export_cloud, format_coord, import_cloud, ply_string, read_csv, read_ply, write_csv, write_ply,
    CloudFormat,
};
pub use model::{load_checkpoint, save_checkpoint, Checkpoint, Model};
pub use run::{
    enhance, enhance_with_model, flops_report, save_report, scene_offset_bound, stage_flops,
    CloudStats, FlopsComparison, RunReport, StageFlops, StageTiming,
};
pub use scene::{gen_scene, synth_proxies, BlobSpec, Proxies, Scene, SceneSpec};
