use serde::{Deserialize, Serialize};

use super::{compute_tag, draw_key, verify_tag, BitString, KeyBlock, KeyBuffer, KeyStream, LinkId};
use super::{QkdError, MAC_KEY_BITS};
use crate::types::ValidatorId;

/// Ciphertext plus one-time MAC tag. The pad occupies
/// `[key_offset, key_offset + |ciphertext|)` of the link stream and the MAC key
/// the [`MAC_KEY_BITS`] immediately after it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedMessage {
    pub link: LinkId,
    pub sender: ValidatorId,
    pub receiver: ValidatorId,
    pub key_offset: u64,
    pub ciphertext: BitString,
    #[serde(with = "hex_tag")]
    pub mac_tag: [u8; 16],
}

mod hex_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("tag must be 16 bytes"))
    }
}

impl SealedMessage {
    /// Total key bits this message consumed.
    pub fn key_bits(&self) -> u64 {
        self.ciphertext.len() + MAC_KEY_BITS
    }

    pub fn mac_key_offset(&self) -> u64 {
        self.key_offset + self.ciphertext.len()
    }
}

/// Encrypts `plaintext` with a fresh pad and authenticates the ciphertext with
/// a fresh MAC key. Either both draws happen or neither does.
pub fn otp_seal(
    plaintext: &BitString,
    buffer: &mut KeyBuffer,
    stream: &KeyStream,
    link: LinkId,
    sender: ValidatorId,
    receiver: ValidatorId,
) -> Result<SealedMessage, QkdError> {
    let need = plaintext.len() + MAC_KEY_BITS;
    if need > buffer.available_bits {
        return Err(QkdError::InsufficientKey {
            requested: need,
            available: buffer.available_bits,
        });
    }
    let (key_offset, ciphertext) = if plaintext.is_empty() {
        (buffer.next_offset, BitString::zeros(0))
    } else {
        let pad = draw_key(buffer, stream, plaintext.len())?;
        (pad.offset, plaintext.xor(&pad.bits))
    };
    let mac_key = draw_key(buffer, stream, MAC_KEY_BITS)?;
    let mac_tag = compute_tag(&mac_key.bits, &ciphertext);
    Ok(SealedMessage {
        link,
        sender,
        receiver,
        key_offset,
        ciphertext,
        mac_tag,
    })
}

/// Authenticates then decrypts. `pad` and `mac_key` must be the receiver's copy
/// of the key ranges named by the message.
pub fn otp_open(
    msg: &SealedMessage,
    pad: &KeyBlock,
    mac_key: &KeyBlock,
) -> Result<BitString, QkdError> {
    if pad.offset != msg.key_offset || pad.length != msg.ciphertext.len() {
        return Err(QkdError::KeyDesync(format!(
            "pad [{}, +{}) does not match message offset {} length {}",
            pad.offset,
            pad.length,
            msg.key_offset,
            msg.ciphertext.len()
        )));
    }
    if mac_key.offset != msg.mac_key_offset() || mac_key.length != MAC_KEY_BITS {
        return Err(QkdError::KeyDesync(format!(
            "MAC key at {} expected at {}",
            mac_key.offset,
            msg.mac_key_offset()
        )));
    }
    if !verify_tag(&mac_key.bits, &msg.ciphertext, &msg.mac_tag) {
        return Err(QkdError::AuthenticationFailure);
    }
    Ok(msg.ciphertext.xor(&pad.bits))
}
