fn main() {
    let env = plotfuse::config::Overrides::from_env();
    std::process::exit(plotfuse::cli::main_with(std::env::args(), env));
}
