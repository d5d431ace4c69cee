fn main() {
    battid::cli::main()
}
