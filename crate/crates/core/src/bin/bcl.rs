fn main() {
    let code = bcl_core::cli::dispatch(std::env::args_os());
    std::process::exit(code);
}
