"""Flat-array layouts shared by the Python and compiled physics kernels.

Both kernels operate on the same packed float64 buffers so they can be swapped
without touching callers. The compiled kernel re-declares these offsets as C
constants and asserts equality with this module at import time; edit here
first, then mirror there.
"""

# --- state vector -----------------------------------------------------------
S_BASE_POS = 0    # 3: world position of the base box center of mass
S_BASE_QUAT = 3   # 4: world orientation, scalar first
S_BASE_LVEL = 7   # 3: world linear velocity
S_BASE_AVEL = 10  # 3: world angular velocity
S_Q = 13          # 12: joint positions, legs LF RF LH RH x (HAA, HFE, KFE)
S_DQ = 25         # 12: joint velocities
S_BALL_POS = 37   # 3
S_BALL_QUAT = 40  # 4
S_BALL_LVEL = 44  # 3
S_BALL_AVEL = 47  # 3
N_STATE = 50

# --- model vector -----------------------------------------------------------
M_DT_SUB = 0
M_N_SUB = 1            # substeps per control step, stored as float
M_GRAVITY = 2          # positive magnitude, acts along -z
M_BASE_MASS = 3
M_BASE_INERTIA = 4     # 3: diagonal, base frame
M_BASE_HALF = 7        # 3: box half extents
M_BALL_MASS = 10
M_BALL_RADIUS = 11
M_BALL_INERTIA = 12    # isotropic scalar
M_CONTACT_STIFFNESS = 13
M_FRICTION_MU = 14
M_RESTITUTION = 15
M_FRICTION_VTOL = 16   # below this slip speed friction ramps linearly to zero
M_KP = 17
M_KD = 18
M_TAU_MAX = 19
M_JOINT_INERTIA = 20   # reflected inertia of each actuated joint
M_FOOT_RADIUS = 21
M_HIP = 22             # 12: hip attachment points in base frame, 4 x 3
M_HIP_OFFSET = 34      # 12: lateral offset vector after the HAA joint, 4 x 3
M_THIGH = 46           # 12: thigh vector after the HFE joint, 4 x 3
M_SHANK = 58           # 12: shank vector after the KFE joint, 4 x 3
M_Q_LO = 70            # 12: joint position lower limits
M_Q_HI = 82            # 12: joint position upper limits
N_MODEL = 94

# --- contact rows -----------------------------------------------------------
# Body codes used in contact rows.
BODY_GROUND = 0
BODY_BASE = 1
BODY_FOOT0 = 2  # feet are BODY_FOOT0 + leg index (LF RF LH RH)
BODY_BALL = 6

C_BODY_A = 0
C_BODY_B = 1
C_POS = 2      # 3: world contact point
C_NORMAL = 5   # 3: unit normal pointing from body A toward body B
C_PEN = 8      # penetration depth, > 0 while touching
C_VN = 9       # relative normal velocity of B w.r.t. A; negative = approaching
C_VT = 10      # 3: relative tangential velocity of B w.r.t. A
C_FN = 13      # normal force magnitude applied to B (0 for detection-only rows)
C_FT = 14      # 3: friction force vector applied to B
N_CONTACT_COLS = 17

# 1 ball-ground + 4 foot-ground + 4 foot-ball + 8 base corners
# + 1 ball-base + 4 foot-base + 6 foot-foot detection-only rows.
MAX_CONTACTS = 28
