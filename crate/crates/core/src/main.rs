fn main() {
    std::process::exit(avatarfit::run());
}
