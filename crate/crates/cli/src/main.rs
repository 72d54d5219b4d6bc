fn main() {
    std::process::exit(diffrobust_cli::parse_and_dispatch(std::env::args_os().skip(1)));
}
