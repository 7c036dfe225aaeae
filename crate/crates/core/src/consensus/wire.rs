use serde::{Deserialize, Serialize};

use super::{ConsensusError, Phase, Proposal, Vote, VoteStatement};
use crate::custody::{SchemeId, Signature};
use crate::hash::Digest;
use crate::types::ValidatorId;

const TAG_PROPOSAL: u8 = 1;
const TAG_VOTE: u8 = 2;

/// A consensus message as carried over the key plane.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Message {
    Proposal(Proposal),
    Vote(Vote),
}

impl Message {
    /// Big-endian binary encoding, one tag byte then the fields in order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Proposal(p) => {
                out.push(TAG_PROPOSAL);
                out.extend_from_slice(&p.height.to_be_bytes());
                out.extend_from_slice(&p.round.to_be_bytes());
                out.extend_from_slice(&p.leader.to_be_bytes());
                out.extend_from_slice(&(p.events.len() as u32).to_be_bytes());
                for e in &p.events {
                    out.extend_from_slice(&e.0);
                }
                out.extend_from_slice(&p.digest.0);
                put_signature(&mut out, &p.signature);
            }
            Message::Vote(v) => {
                out.push(TAG_VOTE);
                out.push(v.statement.phase.tag());
                out.extend_from_slice(&v.statement.height.to_be_bytes());
                out.extend_from_slice(&v.statement.round.to_be_bytes());
                out.extend_from_slice(&v.statement.proposal_digest.0);
                out.extend_from_slice(&v.signer.to_be_bytes());
                put_signature(&mut out, &v.signature);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, ConsensusError> {
        let mut r = Reader { bytes, pos: 0 };
        let msg = match r.u8()? {
            TAG_PROPOSAL => {
                let height = r.u64()?;
                let round = r.u32()?;
                let leader = ValidatorId(r.u64()?);
                let n = r.u32()? as usize;
                if n > bytes.len() / 32 {
                    return Err(malformed("event count exceeds message size"));
                }
                let events = (0..n).map(|_| r.digest()).collect::<Result<Vec<_>, _>>()?;
                let digest = r.digest()?;
                let signature = r.signature()?;
                Message::Proposal(Proposal {
                    height,
                    round,
                    leader,
                    events,
                    digest,
                    signature,
                })
            }
            TAG_VOTE => {
                let phase = match r.u8()? {
                    1 => Phase::Prevote,
                    2 => Phase::Precommit,
                    t => return Err(malformed(&format!("unknown phase {t}"))),
                };
                let statement = VoteStatement {
                    phase,
                    height: r.u64()?,
                    round: r.u32()?,
                    proposal_digest: r.digest()?,
                };
                let signer = ValidatorId(r.u64()?);
                let signature = r.signature()?;
                Message::Vote(Vote {
                    statement,
                    signer,
                    signature,
                })
            }
            t => return Err(malformed(&format!("unknown tag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(malformed("trailing bytes"));
        }
        Ok(msg)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Proposal(_) => "PROPOSAL",
            Message::Vote(v) => match v.statement.phase {
                Phase::Prevote => "PREVOTE",
                Phase::Precommit => "PRECOMMIT",
            },
        }
    }
}

fn malformed(m: &str) -> ConsensusError {
    ConsensusError::Malformed(m.to_string())
}

fn put_signature(out: &mut Vec<u8>, s: &Signature) {
    out.extend_from_slice(&s.signer.to_be_bytes());
    out.push(match s.scheme_id {
        SchemeId::MockDeterministic => 0,
        SchemeId::LatticeProvider => 1,
    });
    out.extend_from_slice(&s.message_digest.0);
    out.extend_from_slice(&(s.bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(&s.bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ConsensusError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| malformed("truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ConsensusError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ConsensusError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ConsensusError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ConsensusError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<Digest, ConsensusError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }

    fn signature(&mut self) -> Result<Signature, ConsensusError> {
        let signer = ValidatorId(self.u64()?);
        let scheme_id = match self.u8()? {
            0 => SchemeId::MockDeterministic,
            1 => SchemeId::LatticeProvider,
            t => return Err(malformed(&format!("unknown scheme {t}"))),
        };
        let message_digest = self.digest()?;
        let len = self.u16()? as usize;
        Ok(Signature {
            signer,
            scheme_id,
            message_digest,
            bytes: self.take(len)?.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(signer: u64, len: usize) -> Signature {
        Signature {
            signer: ValidatorId(signer),
            scheme_id: SchemeId::MockDeterministic,
            message_digest: Digest([7; 32]),
            bytes: (0..len).map(|i| i as u8).collect(),
        }
    }

    #[test]
    fn vote_size_with_default_signature() {
        let v = Message::Vote(Vote {
            statement: VoteStatement {
                phase: Phase::Precommit,
                height: 3,
                round: 1,
                proposal_digest: Digest([1; 32]),
            },
            signer: ValidatorId(2),
            signature: sig(2, 1300),
        });
        let bytes = v.encode();
        // 2 + 8 + 4 + 32 + 8 header, 8 + 1 + 32 + 2 + 1300 signature
        assert_eq!(bytes.len(), 1397);
        assert_eq!(Message::decode(&bytes).unwrap(), v);
        assert!(Message::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Message::decode(&extra).is_err());
    }

    proptest! {
        #[test]
        fn proposal_round_trip(
            height in any::<u64>(),
            round in any::<u32>(),
            leader in any::<u64>(),
            events in proptest::collection::vec(any::<[u8; 32]>(), 0..6),
            sig_len in 0usize..64,
        ) {
            let events: Vec<Digest> = events.into_iter().map(Digest).collect();
            let m = Message::Proposal(Proposal {
                height,
                round,
                leader: ValidatorId(leader),
                digest: Proposal::compute_digest(height, round, ValidatorId(leader), &events),
                events,
                signature: sig(leader, sig_len),
            });
            prop_assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Message::decode(&bytes);
        }
    }
}
