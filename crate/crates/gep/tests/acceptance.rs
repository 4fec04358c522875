fn main_placeholder() {}
#[test]
fn placeholder() { main_placeholder(); }
