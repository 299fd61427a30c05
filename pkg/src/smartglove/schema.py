"""Channel layouts shared by every module."""

SAMPLE_RATE_HZ = 20
FRAME_PERIOD_MS = 50
WINDOW_LENGTH = 40  # 2 s of history at 20 Hz

FINGERS = ("pinky", "ring", "middle", "index")

JOINT_NAMES = tuple(
    [f"{f}_{j}" for f in FINGERS for j in ("mcp_flex", "mcp_abd", "pip_flex", "dip_flex")]
    + ["thumb_mcp_flex", "thumb_mcp_abd", "thumb_ip_flex"]
    + ["wrist_flex", "wrist_abd", "wrist_sup"]
)
N_JOINTS = len(JOINT_NAMES)
WRIST_JOINTS = (19, 20, 21)

# 25 yarn sensors per glove: MCP/PIP/DIP on the four fingers, three on the
# thumb, five fingertips, four finger webs and one palm yarn.
SENSOR_NAMES = tuple(
    [f"{f}_{j}" for f in FINGERS for j in ("mcp", "pip", "dip")]
    + ["thumb_mcp", "thumb_ip", "thumb_cmc"]
    + [f"tip_{f}" for f in FINGERS + ("thumb",)]
    + ["web_pinky_ring", "web_ring_middle", "web_middle_index", "web_index_thumb", "palm"]
)
N_SENSORS = len(SENSOR_NAMES)

# Input channels: strain readings followed by IMU-derived wrist angles.
INPUT_CHANNEL_NAMES = SENSOR_NAMES + ("imu_wrist_flex", "imu_wrist_abd", "imu_wrist_sup")
N_INPUT_CHANNELS = len(INPUT_CHANNEL_NAMES)

# Fingertip channel per finger for tap detection, one glove.
TIP_CHANNEL = {name: SENSOR_NAMES.index(f"tip_{name}") for name in FINGERS + ("thumb",)}

# Tap finger numbering 1..10: left hand thumb..pinky then right hand thumb..pinky.
TAP_FINGER_ORDER = ("thumb", "index", "middle", "ring", "pinky")


def tap_finger_index(hand: str, finger: str) -> int:
    base = 0 if hand == "left" else 5
    return base + TAP_FINGER_ORDER.index(finger) + 1


def tap_finger_channel(finger_index: int):
    """(hand, sensor channel) for a tap finger index in 1..10."""
    if not 1 <= finger_index <= 10:
        raise ValueError(f"finger index {finger_index} outside 1..10")
    hand = "left" if finger_index <= 5 else "right"
    finger = TAP_FINGER_ORDER[(finger_index - 1) % 5]
    return hand, TIP_CHANNEL[finger]
