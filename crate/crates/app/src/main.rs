fn main() {
    std::process::exit(ttg_app::cli::main_with(std::env::args_os()));
}
