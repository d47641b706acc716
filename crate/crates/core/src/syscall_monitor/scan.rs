//! Code scanning for instructions untrusted code must never be able to run.

/// `wrpkru`
pub const WRPKRU: [u8; 3] = [0x0f, 0x01, 0xef];
/// `syscall`
pub const SYSCALL: [u8; 2] = [0x0f, 0x05];
/// `sysenter`
pub const SYSENTER: [u8; 2] = [0x0f, 0x34];

/// Bytes examined per step. Consecutive chunks overlap by the longest
/// pattern minus one so a pattern straddling a boundary is still seen.
pub const SCAN_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanResult {
    Ok,
    FoundForbiddenOpcode(usize),
}

fn patterns(include_syscall: bool) -> Vec<&'static [u8]> {
    let mut p: Vec<&'static [u8]> = vec![&WRPKRU];
    if include_syscall {
        p.push(&SYSCALL);
        p.push(&SYSENTER);
    }
    p
}

/// Finds the lowest offset at which a forbidden pattern starts, at any
/// alignment.
pub fn code_scan(bytes: &[u8], include_syscall: bool) -> ScanResult {
    let pats = patterns(include_syscall);
    let overlap = pats.iter().map(|p| p.len()).max().unwrap_or(1) - 1;
    let mut start = 0;
    while start < bytes.len() {
        let end = (start + SCAN_CHUNK + overlap).min(bytes.len());
        let window = &bytes[start..end];
        let hit = pats
            .iter()
            .filter_map(|p| window.windows(p.len()).position(|w| w == *p))
            .min();
        if let Some(off) = hit {
            return ScanResult::FoundForbiddenOpcode(start + off);
        }
        start += SCAN_CHUNK;
    }
    ScanResult::Ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(bytes: &[u8], include_syscall: bool) -> ScanResult {
        let pats = patterns(include_syscall);
        (0..bytes.len())
            .find(|&i| pats.iter().any(|p| bytes[i..].starts_with(p)))
            .map_or(ScanResult::Ok, ScanResult::FoundForbiddenOpcode)
    }

    #[test]
    fn zero_page_is_clean() {
        assert_eq!(code_scan(&[0u8; 4096], true), ScanResult::Ok);
    }

    #[test]
    fn wrpkru_at_17() {
        let mut page = vec![0u8; 4096];
        page[17..20].copy_from_slice(&WRPKRU);
        assert_eq!(
            code_scan(&page, false),
            ScanResult::FoundForbiddenOpcode(17)
        );
    }

    #[test]
    fn pattern_across_chunk_boundary() {
        for at in SCAN_CHUNK - 2..=SCAN_CHUNK {
            let mut page = vec![0x90u8; 4096];
            page[at..at + 3].copy_from_slice(&WRPKRU);
            assert_eq!(
                code_scan(&page, false),
                ScanResult::FoundForbiddenOpcode(at)
            );
        }
    }

    #[test]
    fn syscall_only_when_asked() {
        let mut page = vec![0u8; 256];
        page[100..102].copy_from_slice(&SYSCALL);
        assert_eq!(code_scan(&page, false), ScanResult::Ok);
        assert_eq!(
            code_scan(&page, true),
            ScanResult::FoundForbiddenOpcode(100)
        );
    }

    proptest! {
        #[test]
        fn matches_whole_buffer_search(
            bytes in proptest::collection::vec(
                prop_oneof![Just(0x0fu8), Just(0x01), Just(0xef), Just(0x05), Just(0x34), any::<u8>()],
                0..400,
            ),
            sys in any::<bool>(),
        ) {
            prop_assert_eq!(code_scan(&bytes, sys), naive(&bytes, sys));
        }
    }
}
