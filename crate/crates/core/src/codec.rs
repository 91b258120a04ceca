// SPDX-License-Identifier: Apache-2.0

//! 137-bit flit format and packet segmentation.
//!
//! Head flit layout (bit ranges inclusive):
//!
//! | bits    | field             |
//! |---------|-------------------|
//! | 130-136 | routing info      |
//! | 128-129 | packet head/tail  |
//! | 125-127 | source id         |
//! | 120-124 | hwa id            |
//! | 119     | packet type       |
//! | 117-118 | task head/tail    |
//! | 115-116 | task buffer id    |
//! | 113-114 | chaining depth    |
//! | 107-112 | chaining index    |
//! | 105-106 | packet priority   |
//! | 103-104 | packet direction  |
//! | 71-102  | start address     |
//! | 61-70   | data size         |
//! | 0-60    | payload           |
//!
//! Body and tail flits keep bits 128-136 (routing info + packet head/tail)
//! and carry 128 bits of payload, little-endian (byte 0 at bit 0).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const FLIT_BITS: u32 = 137;
pub const BODY_PAYLOAD_BYTES: usize = 16;
pub const MAX_DATA_BYTES: usize = 1023;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("field `{0}` exceeds its bit width")]
    FieldOverflow(&'static str),
    #[error("value does not fit in {FLIT_BITS} bits")]
    TooWide,
    #[error("flit is not a head flit")]
    NotHeadFlit,
    #[error("payload of {0} bytes exceeds the 10-bit data size field")]
    Oversize(usize),
    #[error("malformed packet: {0}")]
    Malformed(String),
    #[error("bad hex flit: {0}")]
    BadHex(String),
}

/// One 137-bit flow-control unit. Bits 0..127 live in `lo`, bits 128..136 in `hi`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flit {
    lo: u128,
    hi: u16,
}

const HI_MASK: u16 = (1 << (FLIT_BITS - 128)) - 1;

impl Flit {
    pub const ZERO: Flit = Flit { lo: 0, hi: 0 };

    /// Builds a flit from its upper 9 bits and lower 128 bits.
    pub fn from_parts(hi: u16, lo: u128) -> Result<Self, CodecError> {
        if hi & !HI_MASK != 0 {
            return Err(CodecError::TooWide);
        }
        Ok(Flit { lo, hi })
    }

    pub fn hi(&self) -> u16 {
        self.hi
    }

    pub fn lo(&self) -> u128 {
        self.lo
    }

    /// Extracts `width` bits starting at `lsb`. Fields never straddle bit 128.
    pub fn bits(&self, lsb: u32, width: u32) -> u128 {
        debug_assert!(lsb + width <= FLIT_BITS && width <= 128);
        if lsb >= 128 {
            ((self.hi >> (lsb - 128)) as u128) & mask(width)
        } else {
            debug_assert!(lsb + width <= 128);
            (self.lo >> lsb) & mask(width)
        }
    }

    /// Overwrites `width` bits at `lsb`. The value must already fit.
    pub fn set_bits(&mut self, lsb: u32, width: u32, value: u128) {
        debug_assert!(value <= mask(width));
        if lsb >= 128 {
            let shift = lsb - 128;
            let m = (mask(width) as u16) << shift;
            self.hi = (self.hi & !m) | (((value as u16) << shift) & m);
        } else {
            let m = mask(width) << lsb;
            self.lo = (self.lo & !m) | ((value << lsb) & m);
        }
    }

    pub fn packet_flags(&self) -> FlitFlags {
        FlitFlags::from_bits(self.bits(128, 2) as u8)
    }

    pub fn routing_info(&self) -> u8 {
        self.bits(130, 7) as u8
    }

    pub fn is_head(&self) -> bool {
        self.packet_flags().head
    }

    pub fn is_tail(&self) -> bool {
        self.packet_flags().tail
    }

    /// 35 hex digits, most significant first.
    pub fn to_hex(&self) -> String {
        format!("{:03x}{:032x}", self.hi, self.lo)
    }
}

fn mask(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

impl fmt::Debug for Flit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Flit({})", self.to_hex())
    }
}

impl fmt::Display for Flit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Flit {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != 35 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CodecError::BadHex(s.to_string()));
        }
        let hi = u16::from_str_radix(&s[..3], 16).map_err(|_| CodecError::BadHex(s.into()))?;
        let lo = u128::from_str_radix(&s[3..], 16).map_err(|_| CodecError::BadHex(s.into()))?;
        Flit::from_parts(hi, lo)
    }
}

/// Two-bit head/tail marker used both for flits within a packet and packets within a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlitFlags {
    pub head: bool,
    pub tail: bool,
}

impl FlitFlags {
    pub const HEAD: FlitFlags = FlitFlags { head: true, tail: false };
    pub const TAIL: FlitFlags = FlitFlags { head: false, tail: true };
    pub const BODY: FlitFlags = FlitFlags { head: false, tail: false };
    pub const SINGLE: FlitFlags = FlitFlags { head: true, tail: true };

    pub fn from_bits(b: u8) -> Self {
        FlitFlags { head: b & 0b10 != 0, tail: b & 0b01 != 0 }
    }

    pub fn bits(self) -> u8 {
        ((self.head as u8) << 1) | self.tail as u8
    }
}

/// Destination encoding inside the 7-bit routing info: `{x:3, y:3, endpoint:1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RouteInfo {
    pub x: u8,
    pub y: u8,
    /// Selects between the two endpoints a router may host (0 primary, 1 memory node).
    pub endpoint: u8,
}

impl RouteInfo {
    pub fn new(x: u8, y: u8, endpoint: u8) -> Self {
        RouteInfo { x, y, endpoint }
    }

    pub fn encode(self) -> u8 {
        ((self.x & 7) << 4) | ((self.y & 7) << 1) | (self.endpoint & 1)
    }

    pub fn decode(code: u8) -> Self {
        RouteInfo { x: (code >> 4) & 7, y: (code >> 1) & 7, endpoint: code & 1 }
    }
}

/// Meaning of the packet direction field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Direction {
    /// Processor talks to the FPGA directly.
    #[default]
    Direct,
    /// Input fetched from and results written to memory through the MMU.
    Memory,
}

impl Direction {
    pub fn code(self) -> u8 {
        match self {
            Direction::Direct => 0b00,
            Direction::Memory => 0b01,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0b00 => Some(Direction::Direct),
            0b01 => Some(Direction::Memory),
            _ => None,
        }
    }
}

/// Packet type bit: 1 for command packets (request, grant, notify), 0 for data.
pub const PACKET_TYPE_COMMAND: u8 = 1;
pub const PACKET_TYPE_PAYLOAD: u8 = 0;

/// Decoded head flit. Every field is stored right-aligned in the narrowest
/// convenient integer; `encode_head` rejects values wider than the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct HeadFields {
    pub routing_info: u8,
    pub packet_head_tail: u8,
    pub source_id: u8,
    pub hwa_id: u8,
    pub packet_type: u8,
    pub task_head_tail: u8,
    pub task_buffer_id: u8,
    pub chaining_depth: u8,
    pub chaining_index: u8,
    pub packet_priority: u8,
    pub packet_direction: u8,
    pub start_address: u32,
    pub data_size: u16,
    pub payload: u64,
}

/// (name, lsb, width) for every head field, most significant first.
pub const HEAD_LAYOUT: [(&str, u32, u32); 14] = [
    ("routing_info", 130, 7),
    ("packet_head_tail", 128, 2),
    ("source_id", 125, 3),
    ("hwa_id", 120, 5),
    ("packet_type", 119, 1),
    ("task_head_tail", 117, 2),
    ("task_buffer_id", 115, 2),
    ("chaining_depth", 113, 2),
    ("chaining_index", 107, 6),
    ("packet_priority", 105, 2),
    ("packet_direction", 103, 2),
    ("start_address", 71, 32),
    ("data_size", 61, 10),
    ("payload", 0, 61),
];

impl HeadFields {
    /// Field values in `HEAD_LAYOUT` order.
    pub fn values(&self) -> [u128; 14] {
        [
            self.routing_info as u128,
            self.packet_head_tail as u128,
            self.source_id as u128,
            self.hwa_id as u128,
            self.packet_type as u128,
            self.task_head_tail as u128,
            self.task_buffer_id as u128,
            self.chaining_depth as u128,
            self.chaining_index as u128,
            self.packet_priority as u128,
            self.packet_direction as u128,
            self.start_address as u128,
            self.data_size as u128,
            self.payload as u128,
        ]
    }

    fn from_values(v: [u128; 14]) -> Self {
        HeadFields {
            routing_info: v[0] as u8,
            packet_head_tail: v[1] as u8,
            source_id: v[2] as u8,
            hwa_id: v[3] as u8,
            packet_type: v[4] as u8,
            task_head_tail: v[5] as u8,
            task_buffer_id: v[6] as u8,
            chaining_depth: v[7] as u8,
            chaining_index: v[8] as u8,
            packet_priority: v[9] as u8,
            packet_direction: v[10] as u8,
            start_address: v[11] as u32,
            data_size: v[12] as u16,
            payload: v[13] as u64,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        for ((name, _, width), value) in HEAD_LAYOUT.iter().zip(self.values()) {
            if value > mask(*width) {
                return Err(CodecError::FieldOverflow(name));
            }
        }
        Ok(())
    }

    pub fn route(&self) -> RouteInfo {
        RouteInfo::decode(self.routing_info)
    }

    pub fn direction(&self) -> Option<Direction> {
        Direction::from_code(self.packet_direction)
    }

    pub fn is_command(&self) -> bool {
        self.packet_type == PACKET_TYPE_COMMAND
    }

    pub fn task_flags(&self) -> FlitFlags {
        FlitFlags::from_bits(self.task_head_tail)
    }
}

pub fn encode_head(fields: &HeadFields) -> Result<Flit, CodecError> {
    fields.validate()?;
    let mut flit = Flit::ZERO;
    for ((_, lsb, width), value) in HEAD_LAYOUT.iter().zip(fields.values()) {
        flit.set_bits(*lsb, *width, value);
    }
    Ok(flit)
}

pub fn decode_head(flit: &Flit) -> Result<HeadFields, CodecError> {
    if !flit.is_head() {
        return Err(CodecError::NotHeadFlit);
    }
    Ok(decode_head_unchecked(flit))
}

/// Decodes every field regardless of the head flag.
pub fn decode_head_unchecked(flit: &Flit) -> HeadFields {
    let mut v = [0u128; 14];
    for (slot, (_, lsb, width)) in v.iter_mut().zip(HEAD_LAYOUT.iter()) {
        *slot = flit.bits(*lsb, *width);
    }
    HeadFields::from_values(v)
}

/// Body or tail flit contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct BodyFields {
    /// Routing info in the upper 7 bits, packet head/tail flags in the lower 2.
    pub routing_and_packet_info: u16,
    pub payload: u128,
}

pub fn encode_body(fields: &BodyFields) -> Result<Flit, CodecError> {
    if fields.routing_and_packet_info > HI_MASK {
        return Err(CodecError::FieldOverflow("routing_and_packet_info"));
    }
    Flit::from_parts(fields.routing_and_packet_info, fields.payload)
}

pub fn decode_body(flit: &Flit) -> BodyFields {
    BodyFields { routing_and_packet_info: flit.hi(), payload: flit.lo() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketKind {
    /// Processor to FPGA, single flit.
    Request,
    /// FPGA to requester (processor or MMU), single flit.
    Grant,
    /// FPGA to processor on task completion, single flit.
    Notify,
    /// Input data towards a task buffer.
    Payload,
    /// HWA results leaving the FPGA.
    Result,
}

impl PacketKind {
    pub fn is_command(self) -> bool {
        matches!(self, PacketKind::Request | PacketKind::Grant | PacketKind::Notify)
    }

    /// Command sub-kind tag stored in the task head/tail bits of a command flit.
    pub fn command_tag(self) -> Option<u8> {
        match self {
            PacketKind::Request => Some(0b00),
            PacketKind::Grant => Some(0b10),
            PacketKind::Notify => Some(0b01),
            _ => None,
        }
    }

    /// Recovers the kind of a command head. Data heads are payload or result
    /// depending on which side of the link reads them, so `None` there.
    pub fn from_command_head(h: &HeadFields) -> Option<Self> {
        if !h.is_command() {
            return None;
        }
        match h.task_head_tail {
            0b00 => Some(PacketKind::Request),
            0b10 => Some(PacketKind::Grant),
            0b01 => Some(PacketKind::Notify),
            _ => None,
        }
    }
}

/// A head flit followed by zero or more body flits, the last one flagged tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    flits: Vec<Flit>,
    kind: PacketKind,
}

impl Packet {
    /// Validates packet framing and the single-flit rule for commands.
    pub fn new(kind: PacketKind, flits: Vec<Flit>) -> Result<Self, CodecError> {
        check_framing(&flits)?;
        if kind.is_command() && flits.len() != 1 {
            return Err(CodecError::Malformed(format!(
                "{kind:?} packet must be a single flit, got {}",
                flits.len()
            )));
        }
        let routing = flits[0].routing_info();
        if flits.iter().any(|f| f.routing_info() != routing) {
            return Err(CodecError::Malformed("routing info differs across flits".into()));
        }
        Ok(Packet { flits, kind })
    }

    /// Builds a single-flit command packet, forcing type, framing and sub-kind bits.
    pub fn command(kind: PacketKind, mut header: HeadFields) -> Result<Self, CodecError> {
        let tag = kind
            .command_tag()
            .ok_or_else(|| CodecError::Malformed(format!("{kind:?} is not a command kind")))?;
        header.packet_type = PACKET_TYPE_COMMAND;
        header.packet_head_tail = FlitFlags::SINGLE.bits();
        header.task_head_tail = tag;
        Ok(Packet { flits: vec![encode_head(&header)?], kind })
    }

    pub fn kind(&self) -> PacketKind {
        self.kind
    }

    pub fn flits(&self) -> &[Flit] {
        &self.flits
    }

    pub fn into_flits(self) -> Vec<Flit> {
        self.flits
    }

    pub fn len(&self) -> usize {
        self.flits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flits.is_empty()
    }

    pub fn head(&self) -> HeadFields {
        decode_head_unchecked(&self.flits[0])
    }
}

fn check_framing(flits: &[Flit]) -> Result<(), CodecError> {
    let n = flits.len();
    if n == 0 {
        return Err(CodecError::Malformed("empty packet".into()));
    }
    for (i, f) in flits.iter().enumerate() {
        let expect = FlitFlags { head: i == 0, tail: i == n - 1 };
        if f.packet_flags() != expect {
            return Err(CodecError::Malformed(format!(
                "flit {i} of {n} has flags {:?}, expected {:?}",
                f.packet_flags(),
                expect
            )));
        }
    }
    Ok(())
}

/// Number of flits a data packet of `bytes` bytes occupies.
pub fn flits_for_bytes(bytes: usize) -> usize {
    1 + bytes.div_ceil(BODY_PAYLOAD_BYTES)
}

/// Bytes carried by a data packet of `flits` flits when fully packed.
pub fn bytes_for_flits(flits: usize) -> usize {
    flits.saturating_sub(1) * BODY_PAYLOAD_BYTES
}

/// Splits `data` into a data packet: a head flit (payload field zero) and
/// `ceil(len/16)` body flits, the final one zero-padded. Sets data size and
/// packet framing bits in the header; all other header fields pass through.
pub fn segment(data: &[u8], header: &HeadFields, kind: PacketKind) -> Result<Packet, CodecError> {
    if data.len() > MAX_DATA_BYTES {
        return Err(CodecError::Oversize(data.len()));
    }
    if kind.is_command() {
        return Err(CodecError::Malformed(format!("cannot segment data into a {kind:?}")));
    }
    let bodies = data.len().div_ceil(BODY_PAYLOAD_BYTES);
    let mut head = *header;
    head.data_size = data.len() as u16;
    head.payload = 0;
    head.packet_type = PACKET_TYPE_PAYLOAD;
    head.packet_head_tail = FlitFlags { head: true, tail: bodies == 0 }.bits();
    let mut flits = Vec::with_capacity(1 + bodies);
    flits.push(encode_head(&head)?);
    for (i, chunk) in data.chunks(BODY_PAYLOAD_BYTES).enumerate() {
        let mut word = [0u8; 16];
        word[..chunk.len()].copy_from_slice(chunk);
        let flags = FlitFlags { head: false, tail: i + 1 == bodies };
        let info = ((head.routing_info as u16) << 2) | flags.bits() as u16;
        flits.push(encode_body(&BodyFields {
            routing_and_packet_info: info,
            payload: u128::from_le_bytes(word),
        })?);
    }
    Ok(Packet { flits, kind })
}

/// Inverse of [`segment`]: returns exactly `data_size` bytes.
pub fn reassemble(packet: &Packet) -> Result<Vec<u8>, CodecError> {
    reassemble_flits(packet.flits())
}

pub fn reassemble_flits(flits: &[Flit]) -> Result<Vec<u8>, CodecError> {
    check_framing(flits)?;
    let head = decode_head(&flits[0])?;
    let size = head.data_size as usize;
    let bodies = &flits[1..];
    if bodies.len() != size.div_ceil(BODY_PAYLOAD_BYTES) {
        return Err(CodecError::Malformed(format!(
            "data size {size} needs {} body flits, packet has {}",
            size.div_ceil(BODY_PAYLOAD_BYTES),
            bodies.len()
        )));
    }
    let mut out = Vec::with_capacity(bodies.len() * BODY_PAYLOAD_BYTES);
    for f in bodies {
        out.extend_from_slice(&f.lo().to_le_bytes());
    }
    out.truncate(size);
    Ok(out)
}
