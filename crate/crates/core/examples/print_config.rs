//! Prints the default config file.

fn main() {
    print!("{}", procshift::config::Config::default().to_text());
}
