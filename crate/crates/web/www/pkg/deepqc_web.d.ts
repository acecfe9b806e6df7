/* tslint:disable */
/* eslint-disable */

/**
 * Percentage breakdown of a confusion matrix given as counts.
 */
export function confusion_breakdown(tn: number, fp: number, fn_: number, tp: number): string;

/**
 * Savitzky–Golay weights for the center sample.
 */
export function sg_weights(window: number, order: number, derivative: number): string;

/**
 * Generates one synthetic 5 cm series, runs the rule engine on it and
 * scores the flags against the injected labels.
 */
export function synth_and_flag(seed: number, days: number, anomaly_fraction: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly confusion_breakdown: (a: number, b: number, c: number, d: number) => [number, number];
    readonly sg_weights: (a: number, b: number, c: number) => [number, number];
    readonly synth_and_flag: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
