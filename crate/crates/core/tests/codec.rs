mod common;

use ews_core::wire::{crc16, decode_frame, FrameReader, Packet, HEADER_LEN, MAGIC, TRAILER_LEN};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn packets(seed: u64, n: usize) -> Vec<Packet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| common::random_packet(&mut rng)).collect()
}

proptest! {
    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..600)) {
        let _ = Packet::decode(&bytes);
        let _ = decode_frame(&bytes);
        let mut r = FrameReader::new();
        r.push(&bytes);
        while r.next_frame().is_some() {}
    }

    #[test]
    fn valid_header_with_random_body_is_rejected_or_consistent(
        ty in any::<u8>(),
        body in proptest::collection::vec(any::<u8>(), 0..300),
    ) {
        let mut bytes = vec![MAGIC[0], MAGIC[1], 1, ty];
        bytes.extend_from_slice(&(body.len() as u16).to_be_bytes());
        bytes.extend_from_slice(&body);
        let crc = crc16(&bytes[2..]);
        bytes.extend_from_slice(&crc.to_be_bytes());
        // Well-framed but semantically arbitrary: either an error or a packet
        // that re-encodes to the same bytes.
        if let Ok(p) = Packet::decode(&bytes) {
            prop_assert_eq!(p.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn truncation_is_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let p = &packets(seed, 1)[0];
        let bytes = p.encode().unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Packet::decode(&bytes[..keep]).is_err());
    }

    #[test]
    fn stream_chunking_does_not_matter(seed in any::<u64>(), chunk in 1usize..97) {
        let sent = packets(seed, 20);
        let stream: Vec<u8> = sent.iter().flat_map(|p| p.encode().unwrap()).collect();
        let mut r = FrameReader::new();
        let mut got = Vec::new();
        for piece in stream.chunks(chunk) {
            r.push(piece);
            while let Some(f) = r.next_frame() {
                got.push(Packet::from_frame(&f).unwrap());
            }
        }
        prop_assert_eq!(got, sent);
        prop_assert_eq!(r.skipped(), 0);
    }

    #[test]
    fn reader_resyncs_after_garbage(
        seed in any::<u64>(),
        garbage in proptest::collection::vec(any::<u8>().prop_filter("no magic", |b| *b != MAGIC[0]), 1..200),
    ) {
        let sent = packets(seed, 5);
        let mut r = FrameReader::new();
        r.push(&garbage);
        for p in &sent {
            r.push(&p.encode().unwrap());
        }
        let mut got = Vec::new();
        while let Some(f) = r.next_frame() {
            got.push(Packet::from_frame(&f).unwrap());
        }
        prop_assert_eq!(got, sent);
        prop_assert_eq!(r.skipped(), garbage.len());
    }
}

#[test]
fn corrupted_frame_between_good_ones_is_skipped() {
    let sent = packets(3, 3);
    let mut bad = sent[1].encode().unwrap();
    let last = bad.len() - 1;
    bad[last] ^= 0xFF;
    let mut r = FrameReader::new();
    r.push(&sent[0].encode().unwrap());
    r.push(&bad);
    r.push(&sent[2].encode().unwrap());
    let mut got = Vec::new();
    while let Some(f) = r.next_frame() {
        got.push(Packet::from_frame(&f).unwrap());
    }
    assert_eq!(got, vec![sent[0].clone(), sent[2].clone()]);
    assert_eq!(r.skipped(), bad.len());
}

#[test]
fn frame_overhead_is_eight_bytes() {
    assert_eq!(HEADER_LEN + TRAILER_LEN, 8);
    assert_eq!(Packet::Heartbeat.encode().unwrap().len(), 8);
}
