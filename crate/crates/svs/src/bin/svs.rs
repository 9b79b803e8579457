fn main() {
    // CLI filled in with the trainer module.
}
