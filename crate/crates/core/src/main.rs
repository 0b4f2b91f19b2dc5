fn main() {
    std::process::exit(scribseg::evalcli::run(std::env::args_os()));
}
