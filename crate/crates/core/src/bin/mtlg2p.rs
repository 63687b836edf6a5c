use env_logger::Env;

fn main() {
    env_logger::Builder::from_env(Env::new().filter_or("MTLG2P_LOG", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(mtlg2p::cli::run_from(std::env::args_os()));
}
