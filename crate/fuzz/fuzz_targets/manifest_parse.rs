#![no_main]

use codec_denoiser::dsp::{CorpusManifest, ManifestEntry};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(entry) = ManifestEntry::parse_line(text) {
        assert_eq!(ManifestEntry::parse_line(&entry.to_line()).expect("line re-parses"), entry);
    }
    let _ = CorpusManifest::parse_jsonl(text);
});
