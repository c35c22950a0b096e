/** Typed failures so callers can tell a bad file from a bad run. */

export class TrainerError extends Error {
  constructor(message: string) {
    super(message);
    this.name = new.target.name;
  }
}

/** Raised when an MNIST idx file has the wrong magic or is truncated. */
export class DataFormatError extends TrainerError {}

/** Raised when a weights or vectors file fails magic/version/shape checks. */
export class FileFormatError extends TrainerError {}

/** Raised when the training loss stops being finite. */
export class DivergenceError extends TrainerError {
  readonly epoch: number;
  readonly step: number;

  constructor(message: string, epoch: number, step: number) {
    super(message);
    this.epoch = epoch;
    this.step = step;
  }
}

/** Raised when a model cannot be exported for the inference engine. */
export class ExportError extends TrainerError {}
