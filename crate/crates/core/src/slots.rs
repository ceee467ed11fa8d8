//! Slot wire format: 16-byte magic+version, a length-prefixed JSON header
//! carrying k / d_model / provenance ids, then the float32 little-endian
//! row-major payload. Round-trips are bit-exact.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Cursor, Read, Write};

use crate::encoder::MemorySlots;
use crate::error::{Error, Result};

const MAGIC: &[u8; 12] = b"ICAESLOTFILE";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SlotHeader {
    k: usize,
    d_model: usize,
    model_id: String,
    context_hash: String,
}

pub fn serialize_slots(slots: &MemorySlots) -> Result<Vec<u8>> {
    if slots.slots.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("slots must be finite".into()));
    }
    let header = SlotHeader {
        k: slots.k(),
        d_model: slots.d_model(),
        model_id: slots.model_id.clone(),
        context_hash: slots.context_hash.clone(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + 4 + header_json.len() + slots.slots.len() * 4);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(header_json.len() as u32)?;
    out.write_all(&header_json)?;
    for v in slots.slots.iter() {
        out.write_f32::<LittleEndian>(*v)?;
    }
    Ok(out)
}

pub fn deserialize_slots(bytes: &[u8]) -> Result<MemorySlots> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 12];
    cur.read_exact(&mut magic)
        .map_err(|_| Error::Format("slot file truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a slot file (bad magic)".into()));
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("slot file truncated before version".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported slot format version {version} (expected {VERSION})"
        )));
    }
    let header_len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Format("slot file truncated before header".into()))?
        as usize;
    let mut header_json = vec![0u8; header_len];
    cur.read_exact(&mut header_json)
        .map_err(|_| Error::Format("slot file truncated inside header".into()))?;
    let header: SlotHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Format(format!("bad slot header: {e}")))?;

    let expected = header.k * header.d_model;
    let remaining = bytes.len() - cur.position() as usize;
    if remaining != expected * 4 {
        return Err(Error::Format(format!(
            "slot payload holds {} floats but header says k={} x d_model={} = {}",
            remaining / 4,
            header.k,
            header.d_model,
            expected
        )));
    }
    let mut data = Vec::with_capacity(expected);
    for _ in 0..expected {
        data.push(
            cur.read_f32::<LittleEndian>()
                .map_err(|_| Error::Format("slot file truncated inside payload".into()))?,
        );
    }
    let slots = Array2::from_shape_vec((header.k, header.d_model), data)
        .map_err(|e| Error::Format(format!("bad slot shape: {e}")))?;
    Ok(MemorySlots {
        slots,
        model_id: header.model_id,
        context_hash: header.context_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> MemorySlots {
        MemorySlots {
            slots: Array2::from_shape_fn((4, 8), |(i, j)| (i as f32 - 1.5) * 0.3 + j as f32),
            model_id: "ck-123".into(),
            context_hash: "abcd".into(),
        }
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let slots = sample();
        let bytes = serialize_slots(&slots).unwrap();
        let back = deserialize_slots(&bytes).unwrap();
        assert_eq!(back.model_id, slots.model_id);
        assert_eq!(back.context_hash, slots.context_hash);
        for (a, b) in slots.slots.iter().zip(back.slots.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_stream_is_a_format_error_with_no_partial_object() {
        let bytes = serialize_slots(&sample()).unwrap();
        for cut in [3usize, 14, 20, bytes.len() - 5] {
            let err = deserialize_slots(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut at {cut}: {err:?}");
        }
    }

    #[test]
    fn header_payload_disagreement_names_both_values() {
        let slots = sample();
        let mut bytes = serialize_slots(&slots).unwrap();
        // drop one trailing float: payload no longer matches header k*d
        bytes.truncate(bytes.len() - 4);
        let err = deserialize_slots(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("k=4"), "{msg}");
        assert!(msg.contains("32"), "{msg}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = serialize_slots(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(deserialize_slots(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_any_small_matrix(k in 1usize..6, d in 1usize..10, seed in 0u64..1000) {
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f32 / u32::MAX as f32 - 0.5) * 4.0
            };
            let slots = MemorySlots {
                slots: Array2::from_shape_fn((k, d), |_| next()),
                model_id: format!("m{seed}"),
                context_hash: "h".into(),
            };
            let back = deserialize_slots(&serialize_slots(&slots).unwrap()).unwrap();
            prop_assert_eq!(back.slots.dim(), (k, d));
            for (a, b) in slots.slots.iter().zip(back.slots.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
