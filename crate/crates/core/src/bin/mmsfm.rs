fn main() {
    if let Some(n) = std::env::var("MMSFM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    std::process::exit(mmsfm::cli::run(std::env::args_os()));
}
