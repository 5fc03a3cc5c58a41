//! Small shared helpers.

/// Print a diagnostic line to stderr when `FEDTAD_LOG` is set.
pub fn log(msg: &str) {
    if std::env::var_os("FEDTAD_LOG").is_some() {
        eprintln!("[fedtad] {msg}");
    }
}
