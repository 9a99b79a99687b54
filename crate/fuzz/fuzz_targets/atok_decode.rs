#![no_main]

use codec_denoiser::codec::TokenMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tokens) = TokenMatrix::from_atok(data) {
        assert_eq!(tokens.to_atok(), data);
        assert!(tokens.tokens().iter().all(|&t| (t as usize) < tokens.codebook_size()));
    }
});
