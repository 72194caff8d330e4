fn main() {
    println!("asrlab");
}
