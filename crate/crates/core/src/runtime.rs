//! Process-level settings for long training and sampling runs.

/// Keeps freed heap memory in the process instead of returning it to the OS.
///
/// Each graph allocates and drops several megabytes of intermediates. With
/// glibc's default trimming those pages are unmapped after every step and
/// faulted back in on the next one, which roughly doubles wall time. Call
/// once at program start; a no-op on other platforms.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const M_TRIM_THRESHOLD: i32 = -1;
        const M_MMAP_THRESHOLD: i32 = -3;
        extern "C" {
            fn mallopt(param: i32, value: i32) -> i32;
        }
        // SAFETY: mallopt only adjusts allocator tunables and is safe to call at any time.
        unsafe {
            mallopt(M_TRIM_THRESHOLD, 1 << 30);
            mallopt(M_MMAP_THRESHOLD, 32 << 20);
        }
    }
}
