/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const confusion_breakdown: (a: number, b: number, c: number, d: number) => [number, number];
export const sg_weights: (a: number, b: number, c: number) => [number, number];
export const synth_and_flag: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
