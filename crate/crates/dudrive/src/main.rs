fn main() {
    println!("dudrive");
}
