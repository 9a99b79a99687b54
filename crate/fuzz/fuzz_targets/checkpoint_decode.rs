#![no_main]

use codec_denoiser::codec::CodecModel;
use codec_denoiser::denoiser::DenoiserModel;
use codec_denoiser::nn::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::decode(data) else {
        return;
    };
    assert_eq!(Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes"), ck);
    let _ = CodecModel::from_checkpoint(&ck);
    let _ = DenoiserModel::from_checkpoint(&ck);
});
