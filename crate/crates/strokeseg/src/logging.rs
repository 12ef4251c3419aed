//! `key=value` log lines on stderr; `RUST_LOG` overrides the level.

use std::io::Write;

pub fn init(verbose: bool) {
    let default = if verbose { "debug" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default))
        .format(|buf, rec| {
            writeln!(
                buf,
                "ts={} level={} {}",
                buf.timestamp_millis(),
                rec.level().as_str().to_lowercase(),
                rec.args()
            )
        })
        .try_init();
}
