//! Command-line driver and HTTP evaluation service around `junctionforge-core`.

pub mod api;
pub mod config;
pub mod run;

/// Sizes the global rayon pool from `JUNCTIONFORGE_THREADS`, if set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(n) = std::env::var("JUNCTIONFORGE_THREADS") {
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("JUNCTIONFORGE_THREADS must be a positive integer, got {n:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
