//! Classic libpcap savefile reader (Ethernet, IPv4 TCP/UDP).

use std::io::Read;
use std::net::Ipv4Addr;

use super::{PacketRecord, ParsedLog, Protocol, SkippedRecord};
use crate::error::{Error, Result};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

#[derive(Clone, Copy)]
struct Header {
    big_endian: bool,
    nanos: bool,
}

impl Header {
    fn u32(&self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    }
}

enum Decoded {
    Packet(PacketRecord),
    Unsupported,
    Malformed(String),
}

pub fn parse_pcap<R: Read>(mut source: R) -> Result<ParsedLog> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut out = ParsedLog::default();
    if bytes.is_empty() {
        return Ok(out);
    }
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(Error::Pcap("truncated global header".into()));
    }
    let magic_le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let magic_be = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let header = match (magic_le, magic_be) {
        (MAGIC_MICROS, _) => Header { big_endian: false, nanos: false },
        (MAGIC_NANOS, _) => Header { big_endian: false, nanos: true },
        (_, MAGIC_MICROS) => Header { big_endian: true, nanos: false },
        (_, MAGIC_NANOS) => Header { big_endian: true, nanos: true },
        _ => return Err(Error::Pcap(format!("bad magic {magic_le:#010x}"))),
    };
    let linktype = header.u32(&bytes[20..24]);
    if linktype != LINKTYPE_ETHERNET {
        return Err(Error::Pcap(format!("unsupported link type {linktype}")));
    }

    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            out.malformed.push(SkippedRecord {
                position: offset as u64,
                reason: "truncated record header".into(),
            });
            break;
        }
        let rec = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = header.u32(&rec[0..4]);
        let ts_frac = header.u32(&rec[4..8]);
        let incl_len = header.u32(&rec[8..12]) as usize;
        let data_start = offset + RECORD_HEADER_LEN;
        if bytes.len() - data_start < incl_len {
            out.malformed.push(SkippedRecord {
                position: offset as u64,
                reason: format!("record claims {incl_len} bytes past end of file"),
            });
            break;
        }
        let frac_scale = if header.nanos { 1e-9 } else { 1e-6 };
        let ts = ts_sec as f64 + ts_frac as f64 * frac_scale;
        match decode_ethernet(&bytes[data_start..data_start + incl_len], ts) {
            Decoded::Packet(p) => out.records.push(p),
            Decoded::Unsupported => out.unsupported += 1,
            Decoded::Malformed(reason) => out.malformed.push(SkippedRecord {
                position: offset as u64,
                reason,
            }),
        }
        offset = data_start + incl_len;
    }
    Ok(out)
}

fn be16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn decode_ethernet(frame: &[u8], ts: f64) -> Decoded {
    if frame.len() < 14 {
        return Decoded::Malformed("short ethernet frame".into());
    }
    let mut ethertype = be16(&frame[12..14]);
    let mut l3 = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return Decoded::Malformed("short vlan header".into());
        }
        ethertype = be16(&frame[16..18]);
        l3 = 18;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return Decoded::Unsupported;
    }
    decode_ipv4(&frame[l3..], ts)
}

fn decode_ipv4(ip: &[u8], ts: f64) -> Decoded {
    if ip.len() < 20 {
        return Decoded::Malformed("short ipv4 header".into());
    }
    if ip[0] >> 4 != 4 {
        return Decoded::Malformed(format!("ip version {}", ip[0] >> 4));
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    let total_len = be16(&ip[2..4]) as usize;
    if ihl < 20 || total_len < ihl || ip.len() < ihl {
        return Decoded::Malformed("bad ipv4 lengths".into());
    }
    let proto = ip[9];
    let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let l4 = &ip[ihl..];
    let (protocol, sport, dport, payload) = match proto {
        IPPROTO_TCP => {
            if l4.len() < 20 {
                return Decoded::Malformed("short tcp header".into());
            }
            let data_off = (l4[12] >> 4) as usize * 4;
            if data_off < 20 || total_len < ihl + data_off {
                return Decoded::Malformed("bad tcp data offset".into());
            }
            (Protocol::Tcp, be16(&l4[0..2]), be16(&l4[2..4]), total_len - ihl - data_off)
        }
        IPPROTO_UDP => {
            if l4.len() < 8 {
                return Decoded::Malformed("short udp header".into());
            }
            let udp_len = be16(&l4[4..6]) as usize;
            if udp_len < 8 {
                return Decoded::Malformed("bad udp length".into());
            }
            (Protocol::Udp, be16(&l4[0..2]), be16(&l4[2..4]), udp_len - 8)
        }
        _ => return Decoded::Unsupported,
    };
    Decoded::Packet(PacketRecord {
        timestamp: ts,
        src_ip: src.to_string(),
        dst_ip: dst.to_string(),
        src_port: sport,
        dst_port: dport,
        protocol,
        length: payload as u32,
        label: None,
    })
}
