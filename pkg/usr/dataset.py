"""
Paired HR / LR corpora, procedural or on disk.

On-disk layout (as written by ``save_dataset``)::

    DIR/hr/<name>.ppm
    DIR/lr/<name>.ppm
    DIR/records/<name>.json     optional degradation records
"""
from glob import glob
from os import makedirs
from os.path import basename, isdir, isfile, join, splitext

from twisted.logger import Logger

from usr.degrade import DegradationRecord, Sample, synth_dataset, preset
from usr.errors import DataError
from usr.imageio import read_ppm, write_ppm

HR_DIR = 'hr'
LR_DIR = 'lr'
RECORDS_DIR = 'records'

log = Logger('dataset')


def save_dataset(samples: list[Sample], directory: str):
    for sub in (HR_DIR, LR_DIR, RECORDS_DIR):
        makedirs(join(directory, sub), exist_ok=True)
    for s in samples:
        write_ppm(s.hr, join(directory, HR_DIR, f'{s.name}.ppm'))
        write_ppm(s.lr, join(directory, LR_DIR, f'{s.name}.ppm'))
        if s.record is not None:
            with open(join(directory, RECORDS_DIR, f'{s.name}.json'), 'w') as fp:
                fp.write(s.record.to_json())
    log.info('wrote {count} pairs to {directory}', count=len(samples), directory=directory)


def load_dataset(directory: str) -> list[Sample]:
    """
    Pairs sorted by name; every hr/<name>.ppm needs a matching lr/<name>.ppm
    """
    if not isdir(join(directory, HR_DIR)) or not isdir(join(directory, LR_DIR)):
        raise DataError(f'dataset directory needs "{HR_DIR}/" and "{LR_DIR}/": "{directory}"')
    samples = []
    for hr_path in sorted(glob(join(directory, HR_DIR, '*.ppm'))):
        name = splitext(basename(hr_path))[0]
        lr_path = join(directory, LR_DIR, f'{name}.ppm')
        if not isfile(lr_path):
            raise DataError(f'missing LR image for "{name}" in "{directory}"')
        record = None
        record_path = join(directory, RECORDS_DIR, f'{name}.json')
        if isfile(record_path):
            with open(record_path) as fp:
                record = DegradationRecord.from_json(fp.read())
        samples.append(Sample(read_ppm(hr_path), read_ppm(lr_path), record, name))
    if not samples:
        raise DataError(f'no images found in "{directory}/{HR_DIR}"')
    return samples


def load_images(directory: str) -> list[tuple[str, object]]:
    """
    (name, image) for every *.ppm directly inside ``directory``
    """
    paths = sorted(glob(join(directory, '*.ppm')))
    if not paths:
        raise DataError(f'no .ppm images in "{directory}"')
    return [(splitext(basename(p))[0], read_ppm(p)) for p in paths]


def build_dataset(conf: dict, seed: int, scale: int) -> list[Sample]:
    """
    Corpus described by the "data" section of a run configuration
    """
    data = conf['data']
    if data.get('directory'):
        return load_dataset(data['directory'])
    if data.get('kind', 'procedural') != 'procedural':
        raise DataError(f'unknown dataset kind "{data["kind"]}"')
    return synth_dataset(int(data['count']), int(data['size']), preset(data['mode'], scale), seed)
