use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FORCEKF_LOG", "warn")).init();
    let code = forcekf::cli::execute(std::env::args_os());
    ExitCode::from(code as u8)
}
