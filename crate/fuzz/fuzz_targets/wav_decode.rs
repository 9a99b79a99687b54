#![no_main]

use codec_denoiser::dsp::{decode_wav, encode_wav};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(clip) = decode_wav(data) {
        // decoded samples sit on the PCM16 grid, so a second pass is exact
        let bytes = encode_wav(&clip).expect("decoded clip re-encodes");
        assert_eq!(decode_wav(&bytes).expect("re-encoded clip decodes"), clip);
    }
});
