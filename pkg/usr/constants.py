DEFAULT_LOG_LEVEL = 'info'
DEFAULT_SEED = 0
DEFAULT_SCALE = 4
DEFAULT_CHECKPOINT_NAME = 'usr.usrc'
DEFAULT_RUN_CONFIG_NAME = 'run.json'
DEFAULT_THREADS_ENV = 'USR_THREADS'

# degradation presets, addressable by name
MODE_BLUR_NOISE_JPEG = 'bnj'
MODE_BLUR_NOISE = 'bn'
MODE_BLUR_JPEG = 'bj'
MODE_HIGH_ORDER = 'high'
CLUSTER_MODES = (MODE_BLUR_NOISE_JPEG, MODE_BLUR_NOISE, MODE_BLUR_JPEG)

# training variants (ablation of AUDE and AIS)
VARIANT_FULL = 'full'
VARIANT_NO_AIS = 'no-ais'
VARIANT_NO_AUDE = 'no-aude'
VARIANT_NEITHER = 'neither'
VARIANTS = (VARIANT_FULL, VARIANT_NO_AIS, VARIANT_NO_AUDE, VARIANT_NEITHER)

# USLoss variants (ablation of its two terms)
LOSS_FULL = 'full'
LOSS_NO_LU = 'no-lu'
LOSS_NO_LUR = 'no-lur'
LOSS_VARIANTS = (LOSS_FULL, LOSS_NO_LU, LOSS_NO_LUR)

GRADCHECK_TOLERANCE = 1e-5
PSNR_CAP = 99.0
