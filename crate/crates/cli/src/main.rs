mod args;
mod commands;
mod plot;
mod run;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = cli.threads.unwrap_or_else(num_cpus::get_physical).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::TrainWla(a) => commands::train_wla(a),
        Command::Compress(a) => commands::compress_cmd(a),
        Command::Decompress(a) => commands::decompress_cmd(a),
        Command::Measure(a) => commands::measure_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
        Command::BuildLatentDs(a) => commands::build_latent_ds(a),
        Command::TrainForecaster(a) => commands::train_forecaster_cmd(a),
        Command::EvalForecast(a) => commands::eval_forecast(a),
        Command::Report(a) => commands::report_cmd(a),
    };
    if let Err(e) = result {
        eprintln!("wla {}: {e}", cli.command.name());
        std::process::exit(1);
    }
}
