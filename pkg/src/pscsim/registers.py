"""Controller register map: 256 words of 32 bits, addresses and codecs.

The map is normative for this simulator.  Values readable over the link:

    0x00 MODE        rw  u32: 0 off, 1 on, 2 local
    0x01 I_SET       rw  binary32 A
    0x02 I_READ      ro  binary32 A
    0x03 STATUS      ro  bitfield, see STATUS_* below
    0x04 R_LOAD      ro  binary32 ohm
    0x05 V_OUT       ro  binary32 V
    0x06 WF_OFFSET   rw  binary32 A
    0x07 WF_SCALE    rw  binary32
    0x08 TRIG_ARM    rw  u32, nonzero = armed
    0x10 DAC_A_SRC   rw  offset(binary16) << 16 | source register
    0x11 DAC_A_SCALE rw  binary32
    0x12 DAC_B_SRC   rw  as DAC_A
    0x13 DAC_B_SCALE rw  binary32
    0x20..0x2F       ro  diagnostic counters
    0xF0 DL_CMD      rw  0 abort, 1 begin, 2 commit volatile, 3 commit persistent
    0xF1 DL_STAT     ro  words staged
    0xF2..0xFF       rw  download window (writes append to the staging buffer)

Unknown addresses read as 0 and are not writable.
"""

from __future__ import annotations

import struct

MODE = 0x00
I_SET = 0x01
I_READ = 0x02
STATUS = 0x03
R_LOAD = 0x04
V_OUT = 0x05
WF_OFFSET = 0x06
WF_SCALE = 0x07
TRIG_ARM = 0x08
DAC_A_SRC = 0x10
DAC_A_SCALE = 0x11
DAC_B_SRC = 0x12
DAC_B_SCALE = 0x13
DIAG_BASE = 0x20
DIAG_TOP = 0x2F
DL_CMD = 0xF0
DL_STAT = 0xF1
DL_WINDOW = 0xF2
DL_TOP = 0xFF

MODE_OFF, MODE_ON, MODE_LOCAL = 0, 1, 2

# STATUS bits
STATUS_ON = 1 << 0
STATUS_REGULATING = 1 << 1
STATUS_WAVEFORM_RUNNING = 1 << 2
STATUS_TRIGGER_ARMED = 1 << 3
STATUS_FAULT = 1 << 4
STATUS_TX_BROKEN = 1 << 5
STATUS_RX_BROKEN = 1 << 6
STATUS_LOCAL = 1 << 7
STATUS_LIMIT = 1 << 8

# diagnostic counter slots
DIAG_TICKS = 0x20
DIAG_CRC_ERR = 0x21
DIAG_NAKS = 0x22
DIAG_TRIG_IGNORED = 0x23
DIAG_TRIPS = 0x24
DIAG_WF_LOOPS = 0x25
DIAG_RX_FRAMES = 0x26
DIAG_TX_FRAMES = 0x27

# registers holding binary32 quantities (legal diagnostic-DAC sources)
ANALOG_REGS = {I_SET, I_READ, R_LOAD, V_OUT, WF_OFFSET, WF_SCALE}

WRITABLE_REGS = ({MODE, I_SET, WF_OFFSET, WF_SCALE, TRIG_ARM,
                  DAC_A_SRC, DAC_A_SCALE, DAC_B_SRC, DAC_B_SCALE, DL_CMD}
                 | set(range(DL_WINDOW, DL_TOP + 1)))

READONLY_REGS = ({I_READ, STATUS, R_LOAD, V_OUT, DL_STAT}
                 | set(range(DIAG_BASE, DIAG_TOP + 1)))

MAPPED_REGS = WRITABLE_REGS | READONLY_REGS


def f32_to_word(x: float) -> int:
    return struct.unpack(">I", struct.pack(">f", x))[0]


def word_to_f32(w: int) -> float:
    return struct.unpack(">f", struct.pack(">I", w & 0xFFFFFFFF))[0]


def pack_dac_src(source_reg: int, offset: float) -> int:
    """offset as binary16 in the high half-word, source address in the low byte."""
    off_bits = struct.unpack(">H", struct.pack(">e", offset))[0]
    return (off_bits << 16) | (source_reg & 0xFF)


def unpack_dac_src(word: int):
    offset = struct.unpack(">e", struct.pack(">H", (word >> 16) & 0xFFFF))[0]
    return word & 0xFF, float(offset)
