use unimeec::cli;

fn main() {
    std::process::exit(cli::run());
}
