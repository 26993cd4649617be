use std::collections::BTreeMap;

use bytes::Bytes;
use proptest::prelude::*;

use chunkrelay::codec::*;

fn hash_id() -> impl Strategy<Value = HashId> {
    any::<[u8; 32]>().prop_map(HashId::from_bytes)
}

fn sender_id() -> impl Strategy<Value = SenderId> {
    "[a-zA-Z0-9_.-]{1,24}".prop_map(|s| SenderId::new(s).unwrap())
}

fn text() -> impl Strategy<Value = String> {
    // Arbitrary unicode, including quotes and control characters.
    any::<String>().prop_map(|s| s.chars().take(40).collect())
}

prop_compose! {
    fn header()(
        hash in hash_id(),
        sender in sender_id(),
        package in text(),
        file in text().prop_filter("file name required", |s| !s.is_empty()),
        size in 1u64..=u64::from(u32::MAX) * 4,
        chunk in 1u32..=u32::MAX,
        annotations in proptest::collection::btree_map(text(), text(), 0..4),
    ) -> Option<ImageHeader> {
        ImageHeader::new(hash, sender, package, file, size, chunk, annotations).ok()
    }
}

fn ack() -> impl Strategy<Value = AckMessage> {
    (
        hash_id(),
        0usize..4,
        proptest::collection::btree_set(any::<u32>(), 1..20),
    )
        .prop_map(|(h, k, missing)| match AckKind::ALL[k] {
            AckKind::MissingParts => AckMessage::missing_parts(h, missing.into_iter().collect()).unwrap(),
            kind => AckMessage::new(h, kind),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn header_round_trips(h in header()) {
        if let Some(h) = h {
            let wire = encode_header(&h);
            prop_assert_eq!(decode_header(&wire).unwrap(), h.clone());
            // equal inputs encode identically
            prop_assert_eq!(encode_header(&h.clone()), wire);
        }
    }

    #[test]
    fn fragment_round_trips(
        hash in hash_id(),
        total in 1u32..=u32::MAX,
        index_frac in 0.0f64..1.0,
        payload in proptest::collection::vec(any::<u8>(), 1..512),
    ) {
        let index = ((total as f64 * index_frac) as u32).min(total - 1);
        let f = Fragment::new(hash, index, total, Bytes::from(payload));
        let wire = encode_fragment(&f);
        prop_assert_eq!(wire.len(), f.encoded_len());
        prop_assert_eq!(decode_fragment(&wire).unwrap(), f);
    }

    #[test]
    fn ack_round_trips(a in ack()) {
        prop_assert_eq!(decode_ack(&encode_ack(&a)).unwrap(), a.clone());
        prop_assert_eq!(decode_sender_inbound(&encode_ack(&a)).unwrap(), SenderInbound::Ack(a));
    }

    #[test]
    fn request_and_notice_round_trip(
        requester in sender_id(),
        selector in text().prop_filter("selector required", |s| !s.is_empty()),
        matches in any::<u32>(),
    ) {
        let r = CategoryRequest::new(requester, selector.clone()).unwrap();
        prop_assert_eq!(decode_request(&encode_request(&r)).unwrap(), r);
        let n = RequestNotice { selector, matches };
        prop_assert_eq!(decode_notice(&encode_notice(&n)).unwrap(), n.clone());
        prop_assert_eq!(decode_sender_inbound(&encode_notice(&n)).unwrap(), SenderInbound::Notice(n));
    }

    #[test]
    fn decoders_never_panic_on_noise(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let b = Bytes::from(bytes.clone());
        let _ = decode_fragment(&b);
        let _ = decode_header(&bytes);
        let _ = decode_ack(&bytes);
        let _ = decode_request(&bytes);
        let _ = decode_notice(&bytes);
        let _ = decode_sender_inbound(&bytes);
    }

    #[test]
    fn corrupted_fragments_are_rejected_not_panicking(
        payload in proptest::collection::vec(any::<u8>(), 1..256),
        flip in any::<prop::sample::Index>(),
        mask in 1u8..=255,
    ) {
        let f = Fragment::new(HashId::from_bytes([3; 32]), 0, 1, Bytes::from(payload));
        let mut wire = encode_fragment(&f).to_vec();
        let at = flip.index(wire.len());
        wire[at] ^= mask;
        // any single-byte change is caught by the magic, bounds or CRC checks,
        // or lands in a field that still decodes to a different fragment
        if let Ok(g) = decode_fragment(&Bytes::from(wire)) {
            prop_assert_ne!(g, f);
        }
    }

    #[test]
    fn truncated_json_is_malformed(a in ack(), cut in any::<prop::sample::Index>()) {
        let wire = encode_ack(&a);
        let n = cut.index(wire.len());
        let err = decode_ack(&wire[..n]).unwrap_err();
        prop_assert!(matches!(err, CodecError::MalformedMessage(_)), "{:?}", err);
    }
}

#[test]
fn missing_parts_must_be_non_empty() {
    let h = HashId::from_bytes([1; 32]);
    assert!(AckMessage::missing_parts(h, vec![]).is_err());
    let a = AckMessage::missing_parts(h, vec![5, 1, 5, 3]).unwrap();
    assert_eq!(a.missing, vec![1, 3, 5]);
}

#[test]
fn header_encoding_has_fixed_key_order() {
    let h = ImageHeader::new(
        HashId::from_bytes([0xab; 32]),
        SenderId::new("pc1").unwrap(),
        "Sample PC1",
        "img_001.bin",
        10,
        4,
        BTreeMap::from([("z".to_string(), "1".to_string()), ("a".to_string(), "2".to_string())]),
    )
    .unwrap();
    let expected = format!(
        r#"{{"hash_file":"{}","sender":"pc1","package":"Sample PC1","file":"img_001.bin","size":10,"parts":3,"chunk":4,"annotations":{{"a":"2","z":"1"}}}}"#,
        "ab".repeat(32)
    );
    assert_eq!(String::from_utf8(encode_header(&h)).unwrap(), expected);
}
