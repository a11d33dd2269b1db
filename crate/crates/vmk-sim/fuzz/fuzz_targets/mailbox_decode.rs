//! A mailbox image can hold anything after a fault blast, so decode
//! is specified as total: empty, full, or a typed error, never a
//! panic. Frames that decode must re-encode to an equivalent image.

#![no_main]

use libfuzzer_sys::fuzz_target;
use vmk_sim::ipc;

fuzz_target!(|data: &[u8]| {
    if let Ok(Some(frame)) = ipc::decode(data) {
        let image = ipc::encode(frame.seq, &frame.payload).expect("a decoded payload always fits");
        let back = ipc::decode(&image)
            .expect("encode yields a decodable image")
            .expect("encode yields a full mailbox");
        assert_eq!(back, frame, "decode(encode(frame)) changed the frame");
    }
});
